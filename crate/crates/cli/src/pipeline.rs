use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use stratflow_core::covering::{
    cover_audit, main_covering, write_cover_csv, write_cover_json, DensityOracle, DistanceOracle,
    FieldOracle,
};
use stratflow_core::densities::{
    density_suite, monotonicity_audit, write_density_csv, MonotonicityOptions,
};
use stratflow_core::flow::{make_initial_data, run_flow, InitialData};
use stratflow_core::gmt::{
    center_of_mass, displacement, dyadic_scales, jones_functional, moment_spectrum,
    write_cloud_csv, WeightedPointCloud,
};
use stratflow_core::io::{read_csv, read_trajectory, write_csv, write_trajectory};
use stratflow_core::strata::{
    extract_singular_slice, minkowski_content, quantitative_stratum, regularity_scale,
    write_content_csv, write_flags_csv, DetectionParams, Ladder, PointSet,
};
use stratflow_core::{
    AnalyticField, FieldSource, SpacePoint, SpaceTimeField, SpaceTimePoint, SpatialBall,
};

use crate::config::{stage_seed, FieldChoice, OracleChoice, RunConfig};
use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Densities,
    Strata,
    Gmt,
    Cover,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Densities,
        Stage::Strata,
        Stage::Gmt,
        Stage::Cover,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Densities => "densities",
            Stage::Strata => "strata",
            Stage::Gmt => "gmt",
            Stage::Cover => "cover",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Stage, PipelineError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Stage>, PipelineError> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Stage::parse).collect()
    }

    /// Stages whose config section is present, plus `report`.
    pub fn configured(cfg: &RunConfig) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|st| match st {
                Stage::Simulate => cfg.flow.is_some() || cfg.grid.field != FieldChoice::Simulated,
                Stage::Densities => cfg.densities.is_some(),
                Stage::Strata => cfg.strata.is_some(),
                Stage::Gmt => cfg.gmt.is_some(),
                Stage::Cover => cfg.cover.is_some(),
                Stage::Report => true,
            })
            .collect()
    }
}

/// Runs the requested stages in pipeline order and returns the run
/// directory `out_root/<config hash>`.
pub fn run_pipeline(cfg: &RunConfig, out_root: &Path, stages: &[Stage]) -> Result<PathBuf, PipelineError> {
    let hash = cfg.hash();
    let dir = out_root.join(&hash[..16]);
    fs::create_dir_all(&dir)?;
    let manifest = json!({
        "config_hash": hash,
        "config": serde_json::from_str::<Value>(&cfg.canonical_json()).expect("canonical json"),
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    let run = Run { cfg, dir: dir.clone() };
    for st in order {
        match st {
            Stage::Simulate => run.simulate()?,
            Stage::Densities => run.densities()?,
            Stage::Strata => run.strata()?,
            Stage::Gmt => run.gmt()?,
            Stage::Cover => run.cover()?,
            Stage::Report => run.report()?,
        }
    }
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| PipelineError::Format(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn point(v: &[f64], n: usize, what: &str) -> Result<SpacePoint, PipelineError> {
    if v.len() != n {
        return Err(PipelineError::Config(format!(
            "{what}: expected {n} coordinates, got {}",
            v.len()
        )));
    }
    SpacePoint::new(v).map_err(|e| PipelineError::Config(format!("{what}: {e}")))
}

fn read_points(path: &Path) -> Result<Vec<SpacePoint>, PipelineError> {
    let (_, rows) = read_csv(path)?;
    rows.iter().map(|r| Ok(SpacePoint::new(r)?)).collect()
}

fn write_points(path: &Path, pts: &[SpacePoint], n: usize) -> Result<(), PipelineError> {
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.coords().to_vec()).collect();
    Ok(write_csv(path, &header, &rows)?)
}

/// The field a stage reads: closed form or recorded trajectory.
enum Source {
    Analytic(AnalyticField),
    Recorded(SpaceTimeField),
}

impl Source {
    fn as_dyn(&self) -> &dyn FieldSource {
        match self {
            Source::Analytic(a) => a,
            Source::Recorded(f) => f,
        }
    }

    fn default_time(&self) -> f64 {
        match self {
            Source::Analytic(_) => 0.0,
            Source::Recorded(f) => *f.times().last().expect("non-empty trajectory"),
        }
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
}

impl Run<'_> {
    fn stage_dir(&self, st: Stage) -> Result<PathBuf, PipelineError> {
        let d = self.dir.join(st.name());
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn require(&self, st: Stage, producer: Stage, file: &str) -> Result<PathBuf, PipelineError> {
        let p = self.dir.join(producer.name()).join(file);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Dependency {
                stage: st.name(),
                producer: producer.name(),
                missing: p.display().to_string(),
            })
        }
    }

    fn section<'b, T>(&self, s: &'b Option<T>, st: Stage) -> Result<&'b T, PipelineError> {
        s.as_ref()
            .ok_or_else(|| PipelineError::Config(format!("stage `{}` needs a [{}] section", st.name(), st.name())))
    }

    fn analytic_initial(&self) -> Option<InitialData> {
        let g = &self.cfg.grid;
        match g.field {
            FieldChoice::Simulated => None,
            FieldChoice::Hedgehog => Some(InitialData::Hedgehog {
                on_singular: g.on_singular,
            }),
            FieldChoice::LineSingular => Some(InitialData::LineSingular {
                on_singular: g.on_singular,
            }),
        }
    }

    /// Closed form when the grid names one, else the simulated trajectory.
    fn source(&self, st: Stage) -> Result<Source, PipelineError> {
        let n = self.cfg.grid.dim;
        match self.cfg.grid.field {
            FieldChoice::Hedgehog => Ok(Source::Analytic(AnalyticField::hedgehog(n))),
            FieldChoice::LineSingular => {
                if n != 3 {
                    return Err(PipelineError::Config("line-singular field needs dim = 3".into()));
                }
                Ok(Source::Analytic(AnalyticField::line_singular()))
            }
            FieldChoice::Simulated => {
                self.require(st, Stage::Simulate, "index.json")?;
                Ok(Source::Recorded(read_trajectory(&self.dir.join("simulate"))?))
            }
        }
    }

    /// Gridded field: closed forms are sampled on the configured grid.
    fn gridded(&self, st: Stage) -> Result<SpaceTimeField, PipelineError> {
        match self.analytic_initial() {
            Some(init) => {
                let g = self.cfg.grid.build()?;
                Ok(SpaceTimeField::stationary(make_initial_data(&init, g)?))
            }
            None => match self.source(st)? {
                Source::Recorded(f) => Ok(f),
                Source::Analytic(_) => unreachable!("simulated field choice"),
            },
        }
    }

    fn simulate(&self) -> Result<(), PipelineError> {
        let dir = self.stage_dir(Stage::Simulate)?;
        if let Some(init) = self.analytic_initial() {
            return write_json(
                &dir.join("analytic.json"),
                &json!({ "field": self.cfg.grid.field, "initial": init }),
            );
        }
        let flow = self.section(&self.cfg.flow, Stage::Simulate)?;
        let grid = self.cfg.grid.build()?;
        let mut init = flow.initial.clone();
        if let InitialData::RandomSmooth { seed, .. } = &mut init {
            *seed ^= stage_seed(self.cfg.seed, "simulate");
        }
        let u0 = make_initial_data(&init, grid)?;
        let field = run_flow(&u0, &flow.solver)?;
        write_trajectory(&dir, &field)?;
        let rows: Vec<Vec<f64>> = field
            .monitor()
            .iter()
            .map(|m| vec![m.time, m.max_dudt, m.max_grad, m.max_unit_deviation])
            .collect();
        write_csv(
            &dir.join("monitor.csv"),
            &["t", "max_dudt", "max_grad", "max_unit_deviation"],
            &rows,
        )?;
        Ok(())
    }

    fn densities(&self) -> Result<(), PipelineError> {
        let sec = self.section(&self.cfg.densities, Stage::Densities)?;
        let src = self.source(Stage::Densities)?;
        let dir = self.stage_dir(Stage::Densities)?;
        let n = self.cfg.grid.dim;
        let t0 = sec.t0.unwrap_or_else(|| src.default_time());
        let mut reports = Vec::new();
        let mut audits = Vec::new();
        for c in &sec.centers {
            let x0 = SpaceTimePoint::new(point(c, n, "densities.centers")?, t0)?;
            for &rho in &sec.radii {
                reports.push(density_suite(src.as_dyn(), &x0, rho, sec.cutoff)?);
            }
            if sec.monotonicity {
                let opts = MonotonicityOptions {
                    tolerance: sec.tolerance,
                    ..MonotonicityOptions::default()
                };
                audits.push(monotonicity_audit(src.as_dyn(), &x0, &sec.radii, sec.cutoff, &opts)?);
            }
        }
        write_density_csv(&dir.join("densities.csv"), &reports)?;
        write_json(&dir.join("densities.json"), &reports)?;
        if sec.monotonicity {
            write_json(&dir.join("monotonicity.json"), &audits)?;
        }
        Ok(())
    }

    fn strata(&self) -> Result<(), PipelineError> {
        let sec = self.section(&self.cfg.strata, Stage::Strata)?;
        let f = self.gridded(Stage::Strata)?;
        let dir = self.stage_dir(Stage::Strata)?;
        let grid = f.grid().clone();
        let n = grid.dim();
        let t = sec.t.unwrap_or_else(|| *f.times().last().expect("recorded time"));
        let params = sec
            .detection
            .clone()
            .unwrap_or_else(|| DetectionParams::for_spacing(grid.spacing()));
        let singular = extract_singular_slice(&f, t, &params)?;
        write_points(&dir.join("singular.csv"), &singular, n)?;
        let mut samples = Vec::new();
        for &k in &sec.ks {
            let s = quantitative_stratum(&f, t, k, &params)?;
            write_points(&dir.join(format!("stratum_k{k}.csv")), &s.points, n)?;
            samples.push(s);
        }
        write_flags_csv(&dir.join("flags.csv"), &grid, &samples)?;
        let mut contents = Vec::new();
        if !singular.is_empty() {
            for &r in &sec.content_radii {
                contents.push(minkowski_content(
                    PointSet::Spatial(&singular),
                    sec.content_alpha,
                    r,
                    sec.content_refine,
                )?);
            }
        }
        write_content_csv(&dir.join("content.csv"), &contents)?;
        let ladder = sec.regularity_ladder.clone().unwrap_or(Ladder {
            r_min: grid.spacing(),
            r_max: 1.0,
            steps_per_octave: 4,
        });
        let mut regularity = Vec::new();
        for x in &sec.regularity_points {
            let p = SpaceTimePoint::new(point(x, n, "strata.regularity_points")?, t)?;
            regularity.push(json!({ "x": x, "t": t, "r": regularity_scale(&f, &p, &ladder)? }));
        }
        let strata: Vec<Value> = samples
            .iter()
            .map(|s| json!({ "k": s.k, "count": s.points.len(), "threshold": s.threshold, "ladder": s.ladder }))
            .collect();
        write_json(
            &dir.join("summary.json"),
            &json!({
                "t": t,
                "detection": params,
                "singular_count": singular.len(),
                "strata": strata,
                "content": contents,
                "regularity": regularity,
            }),
        )
    }

    fn gmt(&self) -> Result<(), PipelineError> {
        let sec = self.section(&self.cfg.gmt, Stage::Gmt)?;
        let src = self.require(Stage::Gmt, Stage::Strata, "singular.csv")?;
        let dir = self.stage_dir(Stage::Gmt)?;
        let n = self.cfg.grid.dim;
        let pts = read_points(&src)?;
        let mu = WeightedPointCloud::unit(pts)?;
        write_cloud_csv(&dir.join("cloud.csv"), &mu)?;
        if mu.is_empty() {
            return write_json(&dir.join("report.json"), &json!({ "empty": true }));
        }
        let center = match &sec.center {
            Some(c) => point(c, n, "gmt.center")?,
            None => center_of_mass(
                &mu,
                &SpatialBall {
                    center: SpacePoint::origin(n),
                    radius: f64::INFINITY,
                },
            )?,
        };
        let mut scales = Vec::new();
        for &r in &sec.radii {
            let b = SpatialBall { center, radius: r };
            if mu.mass_in(&b) > 0.0 {
                let spec = moment_spectrum(&mu, &b)?;
                scales.push(json!({
                    "r": r,
                    "mass": spec.mass,
                    "eigenvalues": spec.eigenvalues,
                    "displacement": displacement(&mu, &b, sec.k)?,
                }));
            } else {
                scales.push(json!({ "r": r, "mass": 0.0 }));
            }
        }
        let top = sec.radii.iter().cloned().fold(0.0, f64::max);
        let jones = if top > 0.0 && sec.jones_scales > 0 {
            Some(jones_functional(&mu, &center, sec.k, &dyadic_scales(top, sec.jones_scales))?)
        } else {
            None
        };
        write_json(
            &dir.join("report.json"),
            &json!({ "k": sec.k, "center": center, "scales": scales, "jones": jones }),
        )
    }

    fn cover(&self) -> Result<(), PipelineError> {
        let sec = self.section(&self.cfg.cover, Stage::Cover)?;
        let k = sec.params.k;
        let s_path = self.require(Stage::Cover, Stage::Strata, &format!("stratum_k{k}.csv"))?;
        let s_pts = read_points(&s_path)?;
        let n = self.cfg.grid.dim;
        let center = match &sec.center {
            Some(c) => point(c, n, "cover.center")?,
            None => SpacePoint::origin(n),
        };
        let root = SpatialBall {
            center,
            radius: sec.radius,
        };
        let src;
        let axis;
        let peak;
        let field_oracle;
        let oracle: &dyn DensityOracle = match sec.oracle {
            OracleChoice::Axis => {
                axis = DistanceOracle::axis(n, sec.amplitude);
                &axis
            }
            OracleChoice::Point => {
                peak = DistanceOracle::point(center, sec.amplitude);
                &peak
            }
            OracleChoice::Field => {
                src = self.source(Stage::Cover)?;
                field_oracle = FieldOracle {
                    src: src.as_dyn(),
                    t0: sec.t0.unwrap_or_else(|| src.default_time()),
                    cutoff: sec.cutoff,
                };
                &field_oracle
            }
        };
        let result = main_covering(oracle, &s_pts, &root, &sec.params)?;
        let audit = cover_audit(&result, &s_pts, k);
        let dir = self.stage_dir(Stage::Cover)?;
        write_cover_json(&dir.join("cover.json"), &result)?;
        write_cover_csv(&dir.join("cover.csv"), &result)?;
        write_json(&dir.join("audit.json"), &audit)
    }

    fn report(&self) -> Result<(), PipelineError> {
        let producers = [Stage::Simulate, Stage::Densities, Stage::Strata, Stage::Gmt, Stage::Cover];
        let present: Vec<Stage> = producers
            .into_iter()
            .filter(|s| self.dir.join(s.name()).is_dir())
            .collect();
        if present.is_empty() {
            return Err(PipelineError::Dependency {
                stage: "report",
                producer: "simulate, densities, strata, gmt or cover",
                missing: self.dir.display().to_string(),
            });
        }
        let dir = self.stage_dir(Stage::Report)?;
        let mut stages = serde_json::Map::new();
        for st in present {
            let sd = self.dir.join(st.name());
            let mut names: Vec<String> = fs::read_dir(&sd)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            let mut files = serde_json::Map::new();
            let mut summaries = serde_json::Map::new();
            for name in names {
                let bytes = fs::read(sd.join(&name))?;
                files.insert(name.clone(), Value::String(hex::encode(Sha256::digest(&bytes))));
                if name.ends_with(".json") && name != "cover.json" && name != "index.json" {
                    if let Ok(v) = serde_json::from_slice::<Value>(&bytes) {
                        summaries.insert(name.clone(), v);
                    }
                }
                if name.ends_with(".csv") && name != "flags.csv" {
                    fs::write(dir.join(format!("{}_{name}", st.name())), &bytes)?;
                }
            }
            stages.insert(
                st.name().into(),
                json!({ "files": files, "summaries": summaries }),
            );
        }
        write_json(
            &dir.join("summary.json"),
            &json!({ "config_hash": self.cfg.hash(), "stages": stages }),
        )
    }
}
