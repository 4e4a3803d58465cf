//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Criteria 5 to 9 share one set of training runs.
//!
//! Numeric arguments select criteria: `cargo test --test acceptance -- 1 10`.

mod invariants;
mod io;
mod learning;

use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one criterion: a verdict plus the measured evidence.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    /// Both verdicts must pass; details are joined.
    pub fn and(self, other: Verdict) -> Self {
        Self {
            pass: self.pass && other.pass,
            detail: format!("{}; {}", self.detail, other.detail),
        }
    }
}

type Check = Box<dyn FnOnce() -> Result<Verdict, String>>;
type Learned = fn(&learning::Suite) -> Result<Verdict, String>;

fn main() -> ExitCode {
    let started = Instant::now();
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u8| only.is_empty() || only.contains(&id);
    let mut suite: Option<learning::Suite> = None;
    let mut trained = |f: Learned| -> Result<Verdict, String> {
        if suite.is_none() {
            suite = Some(learning::Suite::train().map_err(|e| e.to_string())?);
        }
        f(suite.as_ref().expect("trained above"))
    };

    let cheap: Vec<(u8, &str, Check)> = vec![
        (1, "gradient suite", Box::new(invariants::gradients)),
        (2, "structural invariants", Box::new(invariants::structure)),
        (3, "gating identity", Box::new(invariants::gating)),
        (4, "metric oracles", Box::new(invariants::metric_oracles)),
    ];
    let mut results: Vec<(u8, &str, Result<Verdict, String>, f64)> = Vec::new();
    for (id, name, check) in cheap.into_iter().filter(|c| wanted(c.0)) {
        let t0 = Instant::now();
        results.push((id, name, check(), t0.elapsed().as_secs_f64()));
    }
    let learned: [(u8, &str, Learned); 5] = [
        (5, "delay recovery", learning::delay_recovery),
        (6, "ablation directionality", learning::ablation),
        (7, "graph recovery", learning::graph_recovery),
        (8, "baseline sanity", learning::baselines),
        (9, "regime protocol", learning::regime_protocol),
    ];
    for (id, name, f) in learned.into_iter().filter(|c| wanted(c.0)) {
        let t0 = Instant::now();
        results.push((id, name, trained(f), t0.elapsed().as_secs_f64()));
    }
    if wanted(10) {
        let t0 = Instant::now();
        results.push((10, "determinism and IO", io::determinism(), t0.elapsed().as_secs_f64()));
    }

    let mut failed = 0;
    println!();
    for (id, name, outcome, secs) in &results {
        let (tag, detail) = match outcome {
            Ok(v) if v.pass => ("PASS", v.detail.as_str()),
            Ok(v) => ("FAIL", v.detail.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:>2} {tag} {name} ({secs:.1}s): {detail}");
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
