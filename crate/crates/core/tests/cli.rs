use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use mftp::cli::config::{parse_file_config, resolve, Command, Overrides};
use mftp::cli::io::{read_dataset, write_dataset};
use mftp::cli::{analyze, run_config};
use mftp::fgrid::Dataset;
use mftp::policy::TreatmentPolicy;
use mftp::simgen::SimConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mftp")
}

fn scenario_data(n: usize, seed: u64) -> Dataset {
    SimConfig::scenario(1).unwrap().population().unwrap().dataset(n, seed).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    assert_eq!(&h[0], "schema_version", "{}", path.display());
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            assert_eq!(&rec[0], "1");
            h.iter().zip(rec.iter()).map(|(a, b)| (a.to_string(), b.to_string())).collect()
        })
        .collect()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_analyze_cfg(text: &str) -> analyze::AnalyzeReport {
    let cfg = resolve(Command::Analyze, parse_file_config(text).unwrap(), Overrides::default()).unwrap();
    std::fs::create_dir_all(&cfg.out).unwrap();
    analyze::run_analyze(&cfg).unwrap()
}

#[test]
fn identity_policy_reports_sample_mean() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    let data = scenario_data(150, 3);
    write_dataset(&input, &data, false).unwrap();
    let out = dir.path().join("out");
    let r = run_analyze_cfg(&format!(
        "input = {input:?}\nout = {out:?}\npolicy = \"identity\"\n[estimation]\nbootstrap = 100\n"
    ));
    let ybar = data.mean_outcome();
    assert_eq!(r.estimates.len(), 4);
    for e in &r.estimates {
        assert!((e.point - ybar).abs() < 1e-6, "{:?} {} vs {ybar}", e.estimator, e.point);
        let (lo, hi) = e.ci.unwrap();
        assert!(lo <= ybar && ybar <= hi);
    }
    let rows = read_csv(&out.join("estimates.csv"));
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert!((row["point"].parse::<f64>().unwrap() - ybar).abs() < 1e-6);
    }
    let w = read_csv(&out.join("weights.csv"));
    assert_eq!(w.len(), 150);
    assert!(w.iter().all(|r| (r["weight"].parse::<f64>().unwrap() - 1.0).abs() < 1e-9));
    for f in ["balance.csv", "outcome_model.csv", "summary.txt", "fpca/model.csv", "fpca/eigenfunctions.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn tau_sweep_rows_and_identity_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    let data = scenario_data(200, 4);
    write_dataset(&input, &data, false).unwrap();
    let out = dir.path().join("out");
    run_analyze_cfg(&format!(
        "input = {input:?}\nout = {out:?}\n[policy]\nkind = \"scale_warp\"\ntau = 0.8\n\
         [estimation]\nbootstrap = 0\n[sweep]\ntau = [1.0, 0.8, 0.6]\n"
    ));
    let rows = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 12);
    let ybar = data.mean_outcome();
    for est in ["OR", "IPW_hajek", "IPW_plain", "AIPW"] {
        let mine: Vec<_> = rows.iter().filter(|r| r["estimator"] == est).collect();
        assert_eq!(mine.len(), 3, "{est}");
        let at_one = mine.iter().find(|r| r["tau"] == "1").unwrap();
        assert!((at_one["point"].parse::<f64>().unwrap() - ybar).abs() < 1e-6, "{est}");
    }
    // pure scaling moves the scores linearly in τ, so the OR curve is monotone
    let or: Vec<f64> = rows.iter().filter(|r| r["estimator"] == "OR").map(|r| r["point"].parse().unwrap()).collect();
    assert!((or[0] - or[1]) * (or[1] - or[2]) >= 0.0, "{or:?}");
}

#[test]
fn nighttime_policy_case_study_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data_path = d.join("activity.csv");
    let policy = "[policy]\nkind = \"window_threshold\"\ntau = 0.3\nwindow = [\"23:00-06:00\"]\nthreshold = 10.0\n";
    let sim = write_config(
        d,
        "sim.toml",
        &format!(
            "out = {:?}\n[simulate]\nscenario = \"1\"\nmean = \"diurnal\"\noracle_n = 50000\n\
             dataset_out = {data_path:?}\ndataset_n = 500\ndataset_clock = true\n{policy}",
            d.join("sim")
        ),
    );
    let st = Proc::new(bin()).args(["simulate", "--config"]).arg(&sim).status().unwrap();
    assert!(st.success());
    let truth = read_csv(&d.join("sim/truth.csv"));
    assert_eq!(truth.len(), 2);

    let out = d.join("out");
    let an = write_config(
        d,
        "an.toml",
        &format!("input = {data_path:?}\nout = {out:?}\n{policy}[estimation]\nbootstrap = 100\n"),
    );
    let st = Proc::new(bin()).args(["analyze", "--threads", "1", "--config"]).arg(&an).status().unwrap();
    assert!(st.success());
    let rows = read_csv(&out.join("estimates.csv"));
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r["point"].parse::<f64>().unwrap().is_finite());
    }
    let ipw = rows.iter().find(|r| r["estimator"] == "IPW_hajek").unwrap();
    let ess: f64 = ipw["ess"].parse().unwrap();
    assert!(ess >= 0.2 * 500.0, "ESS {ess}");

    // the renormalizing constant keeps every curve's integral
    let loaded = read_dataset(&data_path, None).unwrap();
    assert_eq!(loaded.unit, mftp::cli::io::TimeUnit::Clock);
    let spec = resolve(
        Command::Analyze,
        parse_file_config(&format!("input = {data_path:?}\n{policy}")).unwrap(),
        Overrides::default(),
    )
    .unwrap()
    .policy;
    let pol = spec.resolve(loaded.data.grid(), true).unwrap();
    let g = loaded.data.grid();
    for s in loaded.data.samples() {
        let q = pol.apply(g, &s.covariates, &s.values).unwrap();
        let (a, b) = (g.integrate(&s.values).unwrap(), g.integrate(&q).unwrap());
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("d.csv");
    write_dataset(&input, &scenario_data(120, 5), false).unwrap();
    let cfg = |out: &Path| {
        format!(
            "input = {input:?}\nout = {out:?}\nseed = 7\n[policy]\nkind = \"scale_warp\"\ntau = 0.8\n\
             warp_exponent = 1.2\n[estimation]\nbootstrap = 100\n[sweep]\ntau = [1.0, 0.9]\n"
        )
    };
    let mut snaps = Vec::new();
    for (i, threads) in ["1", "1", "2"].iter().enumerate() {
        let out = d.join(format!("out{i}"));
        let c = write_config(d, &format!("c{i}.toml"), &cfg(&out));
        let st = Proc::new(bin()).args(["analyze", "--threads", threads, "--config"]).arg(&c).status().unwrap();
        assert!(st.success());
        snaps.push(snapshot(&out));
    }
    assert_eq!(snaps[0], snaps[1]);
    assert_eq!(snaps[0], snaps[2], "thread count changed the output");
    assert!(snaps[0].len() >= 9);
}

#[test]
fn simulate_outputs_are_schema_valid_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut snaps = Vec::new();
    for i in 0..2 {
        let out = d.join(format!("sim{i}"));
        let text = format!(
            "out = {out:?}\n[fpca]\nK = 2\n[simulate]\nscenario = \"2\"\nn = [60, 120]\nreplications = 10\n\
             oracle_n = 20000\nT = 40\np = 6\nk_sweep = [2, 3]\n"
        );
        let cfg = resolve(Command::Simulate, parse_file_config(&text).unwrap(), Overrides::default()).unwrap();
        run_config(&cfg).unwrap();
        for f in ["mse.csv", "ksweep.csv", "replications.csv", "truth.csv"] {
            assert!(!read_csv(&out.join(f)).is_empty(), "{f}");
        }
        let mse = read_csv(&out.join("mse.csv"));
        assert_eq!(mse.len(), 2 * 3);
        assert!(mse.iter().all(|r| r["mse"].parse::<f64>().unwrap() > 0.0));
        snaps.push(snapshot(&out));
    }
    assert_eq!(snaps[0], snaps[1]);
}

#[test]
fn replication_guard_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = write_config(d, "bad.toml", "[simulate]\nscenario = \"1\"\nreplications = 3\n");
    let o = Proc::new(bin()).args(["simulate", "--config"]).arg(&c).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[config]") && err.contains("simulate.replications"), "{err}");

    let c = write_config(d, "unknown.toml", "policy = \"identity\"\nfoo = 1\n");
    let o = Proc::new(bin()).args(["analyze", "--config"]).arg(&c).output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = Proc::new(bin()).args(["analyze", "--policy", "scale_warp", "--tau", "0", "--input"]).arg(&c).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("policy.tau"));

    let bad = d.join("bad.csv");
    std::fs::write(&bad, "id,Y,A@0,A@1\na,1,0,1\nb,oops,1,0\n").unwrap();
    let o = Proc::new(bin()).args(["analyze", "--policy", "identity", "--input"]).arg(&bad).arg("--out").arg(d.join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[input]") && err.contains("line 3"), "{err}");
}

#[test]
fn fpca_diagnose_writes_decay_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    write_dataset(&input, &scenario_data(300, 6), false).unwrap();
    let out = dir.path().join("diag");
    let st = Proc::new(bin()).args(["fpca-diagnose", "--input"]).arg(&input).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let rows = read_csv(&out.join("decay.csv"));
    let tails: Vec<f64> = rows.iter().map(|r| r["tail_residual"].parse().unwrap()).collect();
    assert!(tails.windows(2).all(|w| w[1] <= w[0]));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("decay law: exponential"), "{summary}");
}
