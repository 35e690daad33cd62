use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::{Protocol, ScenarioConfig};
use crate::jacobian::{ComparisonReport, Formulation, LearningSession};
use crate::tfod::{FewShotSet, Ledger, TaskId, TrialReport};

pub const TRIAL_CSV_HEADER: &str = "arm,trial,Find,Servo,Depth,Grasp,PlaceFind,examples,clicks,\
annotation_s,robot_s,cpu_s,vs_pct,de_pct,grasp_pct,placements,sim_s";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub objects: u32,
    pub vs: f64,
    pub de: f64,
    /// Absent when the protocol does not grasp.
    pub grasp: Option<f64>,
}

impl Rates {
    pub fn of(trials: &[TrialReport], grasp: bool) -> Self {
        let objs: Vec<_> = trials.iter().flat_map(|t| t.objects.iter()).collect();
        let n = objs.len() as u32;
        let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
        Rates {
            objects: n,
            vs: pct(objs.iter().filter(|o| o.vs).count()),
            de: pct(objs.iter().filter(|o| o.de).count()),
            grasp: grasp.then(|| pct(objs.iter().filter(|o| o.grasp).count())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub trials: Vec<TrialReport>,
    pub rates: Rates,
    pub totals: Ledger,
    pub mean_examples: f64,
    pub placements: u32,
    pub sim_seconds: f64,
    pub picks_per_hour: f64,
    /// Every example this arm added, after any preloaded prior.
    pub final_set: FewShotSet,
}

impl ArmReport {
    pub fn from_trials(name: &str, results: Vec<(TrialReport, FewShotSet)>, grasp: bool) -> Self {
        let prior = results
            .first()
            .map(|(_, s)| {
                let mut p = FewShotSet::default();
                for (prov, ex) in s.provenance().iter().zip(s.examples()) {
                    if *prov == u64::MAX {
                        p.push_unchecked(ex.clone());
                    }
                }
                p
            })
            .filter(|p| !p.is_empty());
        let final_set = super::protocols::inherit(prior.as_ref(), &results);
        let trials: Vec<TrialReport> = results.into_iter().map(|(t, _)| t).collect();
        let mut totals = Ledger::default();
        let mut placements = 0;
        let mut sim_seconds = 0.0;
        for t in &trials {
            totals.add(&t.ledger);
            placements += t.placements;
            sim_seconds += t.sim_seconds;
        }
        let mean_examples = if trials.is_empty() {
            0.0
        } else {
            totals.examples as f64 / trials.len() as f64
        };
        ArmReport {
            name: name.to_string(),
            rates: Rates::of(&trials, grasp),
            trials,
            totals,
            mean_examples,
            placements,
            sim_seconds,
            picks_per_hour: picks_per_hour(placements, sim_seconds),
            final_set,
        }
    }
}

pub fn picks_per_hour(placements: u32, sim_seconds: f64) -> f64 {
    if sim_seconds > 0.0 {
        3600.0 * placements as f64 / sim_seconds
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningReport {
    pub analytic: (f64, f64),
    pub session: LearningSession,
    pub ledger: Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub version: String,
    pub arms: Vec<ArmReport>,
    pub learning: Option<LearningReport>,
    pub comparison: Option<ComparisonReport>,
}

impl RunReport {
    pub fn new(cfg: &ScenarioConfig, arms: Vec<ArmReport>) -> Self {
        Self {
            protocol: cfg.protocol,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            arms,
            learning: None,
            comparison: None,
        }
    }

    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Table-1 layout for learning runs, per-trial ledger rows otherwise.
    pub fn to_csv(&self) -> String {
        if let Some(c) = &self.comparison {
            return c.to_csv();
        }
        let mut out = String::from(TRIAL_CSV_HEADER);
        out.push('\n');
        for arm in &self.arms {
            for (i, t) in arm.trials.iter().enumerate() {
                let r = Rates::of(std::slice::from_ref(t), arm.rates.grasp.is_some());
                push_row(&mut out, &arm.name, &i.to_string(), &t.ledger, &r, t.placements as f64, t.sim_seconds);
            }
            let n = arm.trials.len().max(1) as f64;
            let l = &arm.totals;
            let mean = MeanLedger {
                counters: TaskId::ALL.map(|k| l.counters.get(k) as f64 / n),
                examples: l.examples as f64 / n,
                clicks: l.clicks as f64 / n,
                annotation_s: l.annotation_s / n,
                robot_s: l.robot_s / n,
                cpu_s: l.cpu_s / n,
            };
            mean.push(&mut out, &arm.name, &arm.rates, arm.placements as f64 / n, arm.sim_seconds / n);
        }
        out
    }

    /// Acceptance checks used by the CLI's CI mode.
    pub fn acceptance_failures(&self) -> Vec<String> {
        let mut bad = Vec::new();
        match self.protocol {
            Protocol::VsLearning => {
                if let Some(l) = &self.learning {
                    if !l.session.converged {
                        bad.push(format!("learning did not converge in {} updates", l.session.updates_used));
                    }
                }
                if let Some(c) = &self.comparison {
                    let m = |f| c.row(f).map(|r| r.mean_updates).unwrap_or(f64::INFINITY);
                    if m(Formulation::Masked) > m(Formulation::BroydenBad) {
                        bad.push("masked update slower than the unmasked form".into());
                    }
                }
            }
            Protocol::VosvsBench => {
                for a in &self.arms {
                    if a.rates.vs < 100.0 {
                        bad.push(format!("{}: VS success {:.1}%", a.name, a.rates.vs));
                    }
                    for (i, t) in a.trials.iter().enumerate() {
                        if !(1..=20).contains(&t.examples()) {
                            bad.push(format!("{} trial {i}: {} examples", a.name, t.examples()));
                        }
                    }
                }
            }
            Protocol::PickPlace | Protocol::PickPlaceClutter => {
                if let (Some(on), Some(off)) = (self.arm("tfod_on_prior_on"), self.arm("tfod_off_prior_on")) {
                    let (a, b) = (on.rates, off.rates);
                    if a.vs < b.vs || a.de < b.de || a.grasp < b.grasp {
                        bad.push("TFOD-on arm below TFOD-off arm".into());
                    }
                }
            }
            Protocol::DynamicPlace => {
                for a in &self.arms {
                    let targets: usize = a.trials.iter().map(|t| t.objects.len()).sum();
                    if a.placements as usize != targets {
                        bad.push(format!("{}: {} of {} placed", a.name, a.placements, targets));
                    }
                }
            }
        }
        bad
    }
}

struct MeanLedger {
    counters: [f64; 5],
    examples: f64,
    clicks: f64,
    annotation_s: f64,
    robot_s: f64,
    cpu_s: f64,
}

impl MeanLedger {
    fn push(&self, out: &mut String, arm: &str, r: &Rates, placements: f64, sim_s: f64) {
        let c = &self.counters;
        out.push_str(&format!(
            "{arm},mean,{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.1},{:.1},{:.1},{},{:.2},{:.1}\n",
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            self.examples,
            self.clicks,
            self.annotation_s,
            self.robot_s,
            self.cpu_s,
            rates_cols(r),
            placements,
            sim_s
        ));
    }
}

fn rates_cols(r: &Rates) -> String {
    let g = r.grasp.map(|g| format!("{g:.1}")).unwrap_or_default();
    format!("{:.1},{:.1},{g}", r.vs, r.de)
}

fn push_row(out: &mut String, arm: &str, trial: &str, l: &Ledger, r: &Rates, placements: f64, sim_s: f64) {
    let c = &l.counters;
    out.push_str(&format!(
        "{arm},{trial},{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{},{placements},{sim_s:.1}\n",
        c.find,
        c.servo,
        c.depth,
        c.grasp,
        c.place_find,
        l.examples,
        l.clicks,
        l.annotation_s,
        l.robot_s,
        l.cpu_s,
        rates_cols(r),
    ));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// Write the requested report files plus per-trial depth series.
pub fn emit_report(report: &RunReport, dir: &Path, formats: &[Format]) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&Format::Json) {
        let p = dir.join("report.json");
        std::fs::write(&p, report.to_json())?;
        written.push(p);
    }
    if formats.contains(&Format::Csv) {
        let p = dir.join("report.csv");
        std::fs::write(&p, report.to_csv())?;
        written.push(p);
        let depth_dir = dir.join("depth_series");
        for arm in &report.arms {
            for (i, t) in arm.trials.iter().enumerate() {
                for (k, d) in t.depth_traces.iter().enumerate() {
                    if d.series.checkpoints.is_empty() {
                        continue;
                    }
                    std::fs::create_dir_all(&depth_dir)?;
                    let p = depth_dir.join(format!("{}_t{i}_{k}_{}.csv", arm.name, d.object));
                    std::fs::write(&p, d.series.to_csv())?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}
