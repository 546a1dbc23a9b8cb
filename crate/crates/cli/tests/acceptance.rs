//! Acceptance suite: runs the sample configurations through the binary and
//! prints one PASS/FAIL line per criterion. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

struct ResultRow {
    instance: String,
    metric: String,
    value: f64,
    pass: Option<bool>,
}

struct Run {
    code: Option<i32>,
    elapsed: Duration,
    dir: PathBuf,
    rows: Vec<ResultRow>,
}

impl Run {
    fn selected(&self, keep: impl Fn(&ResultRow) -> bool) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.pass.is_some() && keep(r)).collect()
    }

    fn worst(&self, keep: impl Fn(&ResultRow) -> bool) -> f64 {
        self.selected(keep).iter().fold(0.0, |m, r| if r.value > m { r.value } else { m })
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(config: &Path, out: &Path, jobs: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssnll"));
    cmd.arg("--quiet").arg("--config").arg(config).arg("--out").arg(out);
    if let Some(j) = jobs {
        cmd.args(["--jobs", j]);
    }
    let start = Instant::now();
    let output = cmd.output().expect("binary runs");
    let elapsed = start.elapsed();
    if !output.stderr.is_empty() {
        eprint!("{}", String::from_utf8_lossy(&output.stderr));
    }
    let mut rows = Vec::new();
    if let Ok(mut reader) = csv::Reader::from_path(out.join("results.csv")) {
        for rec in reader.records() {
            let rec = rec.expect("well-formed results.csv");
            rows.push(ResultRow {
                instance: rec[1].to_string(),
                metric: rec[3].to_string(),
                value: rec[4].parse().expect("numeric value"),
                pass: match &rec[6] {
                    "" => None,
                    p => Some(p == "true"),
                },
            });
        }
    }
    Run { code: output.status.code(), elapsed, dir: out.to_path_buf(), rows }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(run: &Run, rows: &[&ResultRow], min_rows: usize, budget: Option<Duration>, detail: String) -> Verdict {
    let checks_ok = rows.len() >= min_rows && rows.iter().all(|r| r.pass == Some(true));
    let time_ok = budget.is_none_or(|b| run.elapsed <= b);
    let mut detail = format!("{detail}; {} checks; {:.1}s", rows.len(), run.elapsed.as_secs_f64());
    if !time_ok {
        detail.push_str(" (over time budget)");
    }
    if run.code.is_none() || run.code == Some(2) || run.code == Some(3) {
        detail.push_str(&format!(" (exit {:?})", run.code));
        return Verdict { pass: false, detail };
    }
    Verdict { pass: checks_ok && time_ok, detail }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let cfg = configs_dir();
    let out = |name: &str| work.path().join(name);
    let mut verdicts: Vec<(&str, &str, Verdict)> = Vec::new();

    let r = run(&cfg.join("gradcheck.cfg"), &out("gradcheck"), None);
    let rows = r.selected(|_| true);
    let detail = format!("worst relative FD error {:e} over {} instances per op", r.worst(|_| true), rows_value(&r, "instances_per_op"));
    verdicts.push(("C1", "gradient suite", verdict(&r, &rows, 4, minutes(1), detail)));

    let r = run(&cfg.join("stationarity.cfg"), &out("stationarity"), None);
    let rows = r.selected(|_| true);
    let instances = r.rows.iter().map(|x| x.instance.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    let detail = format!("worst residual {:e} on {instances} instances", r.worst(|_| true));
    verdicts.push(("C2", "stationarity at the exact posterior", verdict(&r, &rows, 80, minutes(1), detail)));

    let p1 = run(&cfg.join("prop1_gaussian.cfg"), &out("prop1_gaussian"), None);
    let exact = |x: &ResultRow| x.metric.starts_with("restart") || x.metric == "mean_operator_min_eigenvalue";
    let rows = p1.selected(exact);
    let detail = format!(
        "worst mean/var relative error {:e} / {:e}",
        p1.worst(|x| x.metric.ends_with("mean_rel_error") && exact(x)),
        p1.worst(|x| x.metric.ends_with("var_rel_error") && exact(x)),
    );
    verdicts.push(("C3", "risk minimizer = posterior moments (Gaussian)", verdict(&p1, &rows, 5 * (20 * 5 + 2), minutes(5), detail)));

    let r = run(&cfg.join("prop1_gmm.cfg"), &out("prop1_gmm"), None);
    let rows = r.selected(|_| true);
    let detail = format!(
        "worst mean/var relative error {:e} / {:e}",
        r.worst(|x| x.metric == "mean_rel_error"),
        r.worst(|x| x.metric == "var_rel_error")
    );
    verdicts.push(("C4", "sampled-risk minimizer = mixture posterior moments", verdict(&r, &rows, 3, minutes(10), detail)));

    let rows = p1.selected(|x| x.metric.starts_with("zero_rhat"));
    let detail = format!("worst relative gap to diag Σ + R {:e}", p1.worst(|x| x.metric == "zero_rhat_var_vs_var_plus_noise"));
    verdicts.push(("C5", "no noise correction inflates the variance by R", verdict(&p1, &rows, 5 * 3, minutes(5), detail)));

    let rows = p1.selected(|x| x.metric.starts_with("biased_mean"));
    let detail = format!("worst relative gap to diag Σ + δ² {:e}", p1.worst(|x| x.metric == "biased_mean_var_vs_var_plus_bias2"));
    verdicts.push(("C6", "frozen mean bias inflates the variance by δ²", verdict(&p1, &rows, 5 * 2, None, detail)));

    let r = run(&cfg.join("train_affine.cfg"), &out("train_affine"), None);
    let rows = r.selected(|_| true);
    let get = |scope_metric: &str| rows_value(&r, scope_metric);
    let detail = format!(
        "mean rel RMSE self/sup {:.2e}/{:.2e}, variance rel error self/sup {:.2e}/{:.2e}",
        nth_value(&r, "mean_rel_rmse_vs_oracle", 0),
        nth_value(&r, "mean_rel_rmse_vs_oracle", 1),
        nth_value(&r, "var_rel_error_vs_oracle", 0),
        nth_value(&r, "var_rel_error_vs_oracle", 1),
    ) + &format!(", agreement {:.2e}/{:.2e}", get("mean_rel_rmse"), get("var_rel_error"));
    verdicts.push(("C7", "self-supervised training matches supervised and oracle", verdict(&r, &rows, 6, minutes(30), detail)));

    let r = run(&cfg.join("coverage.cfg"), &out("coverage"), None);
    let rows = r.selected(|_| true);
    let detail = format!(
        "{} pixels, worst deviation {:e}, CE {:e}",
        rows_value(&r, "pixels"),
        r.worst(|x| x.metric.starts_with("deviation")),
        rows_value(&r, "calibration_error")
    );
    verdicts.push(("C8", "oracle calibration", verdict(&r, &rows, 20, None, detail)));

    let r = run(&cfg.join("subgrid.cfg"), &out("subgrid"), None);
    let rows = r.selected(|_| true);
    let detail = format!("reference subgrid smallest on a fraction {} of instances", rows_value(&r, "win_fraction"));
    verdicts.push(("C9", "reference subgrid is the most certain", verdict(&r, &rows, 1, None, detail)));

    verdicts.push(("C10", "byte-identical CSV across --jobs", determinism(work.path())));

    let mut failed = 0;
    for (id, name, v) in &verdicts {
        println!("{} {id} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rows_value(run: &Run, metric: &str) -> f64 {
    run.rows.iter().find(|r| r.metric == metric).map_or(f64::NAN, |r| r.value)
}

fn nth_value(run: &Run, metric: &str, n: usize) -> f64 {
    run.rows.iter().filter(|r| r.metric == metric).nth(n).map_or(f64::NAN, |r| r.value)
}

/// Every CSV artifact of a directory, by file name.
fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
                .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
                .collect()
        })
        .unwrap_or_default()
}

/// Reduced versions of every experiment, each run with one and with four
/// workers.
fn determinism(work: &Path) -> Verdict {
    let cases = [
        ("gradcheck", "experiment = gradcheck\ninstances = 10\n"),
        ("stationarity", "experiment = stationarity\ninstances = 8\nhr_height = 8\nhr_width = 8\n"),
        ("prop1", "experiment = prop1\ninstances = 2\nrestarts = 4\n"),
        ("prop1_gmm", "experiment = prop1\nprior = gmm\nhr_height = 2\nhr_width = 2\nframes = 1\ninstances = 2\nmc_samples = 20000\n"),
        (
            "train_affine",
            "experiment = train_affine\nparity = balanced\ntrain_bursts = 3000\ntest_bursts = 100\nepochs = 4\nbatch_size = 256\n",
        ),
        ("coverage_study", "experiment = coverage_study\ncoverage_pixels = 50000\n"),
        ("subgrid_study", "experiment = subgrid_study\ninstances = 4\nbursts_per_instance = 30\n"),
    ];
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (name, text) in cases {
        let cfg = work.join(format!("det_{name}.cfg"));
        fs::write(&cfg, text).unwrap();
        let a = run(&cfg, &work.join(format!("det_{name}_j1")), Some("1"));
        let b = run(&cfg, &work.join(format!("det_{name}_j4")), Some("4"));
        let (fa, fb) = (csv_files(&a.dir), csv_files(&b.dir));
        files += fa.len();
        if a.code != Some(0) && a.code != Some(1) || fa.is_empty() || fa != fb {
            mismatches.push(name);
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{files} CSV files identical over {} experiments", cases.len())
    } else {
        format!("differences in {}", mismatches.join(", "))
    };
    Verdict { pass: mismatches.is_empty(), detail }
}
