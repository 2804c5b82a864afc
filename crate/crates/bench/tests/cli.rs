use std::path::Path;
use std::process::Command;

use cubestrat_bench::read_rows;

fn cubestrat(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cubestrat")).args(args).output().expect("binary runs")
}

fn run_to(path: &Path, extra: &[&str]) {
    let mut args = vec!["run", "--out", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = cubestrat(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_is_reproducible_to_the_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let flags = ["--fn", "fs", "--dim", "2", "--variant", "haber1,hat,tilde", "--r", "2,3", "--k", "4,6,8", "--reps", "5", "--seed", "11"];
    run_to(&a, &flags);
    run_to(&b, &flags);
    let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("variant,r,k,n_evals,rel_error,discarded,slope_group\n"));
    // haber1 once, hat and tilde once per order, three k each
    assert_eq!(text.lines().count(), 1 + 5 * 3);
}

#[test]
fn slope_command_recovers_haber1_rate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("h.csv");
    run_to(&csv, &["--variant", "haber1", "--k", "4,8,16,32,64", "--reps", "40"]);
    let out = cubestrat(&["slope", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("slope_group,slope"));
    let (group, slope) = lines.next().unwrap().split_once(',').unwrap();
    assert_eq!(group, "haber1-r1");
    let slope: f64 = slope.parse().unwrap();
    assert!((slope + 3.0).abs() < 0.45, "slope {slope}");
}

#[test]
fn exact_cells_sit_at_rounding_level() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    run_to(&csv, &["--fn", "poly2", "--dim", "2", "--variant", "hat", "--r", "4", "--k", "4,5,6,7,8", "--reps", "4"]);
    let rows = read_rows(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    // exact up to the last bit or two of the reference integral
    assert!(rows.iter().all(|r| r.rel_error <= 1e-31), "{rows:?}");
    assert!(rows.iter().all(|r| r.discarded == (r.rel_error <= 1e-32)));
    assert!(rows.iter().any(|r| r.discarded));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.conf");
    std::fs::write(&cfg, "# crude ladder\nvariant = crude\nk = 4,8\nreps = 3\nseed = 5\n").unwrap();
    let csv = dir.path().join("c.csv");
    run_to(&csv, &["--config", cfg.to_str().unwrap(), "--k", "4,8,16"]);
    let rows = read_rows(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![4, 8, 16]);
    assert!(rows.iter().all(|r| r.variant.name() == "crude" && r.r == 0));
}

#[test]
fn orders_subcommand_marks_one_order_per_k() {
    let out = cubestrat(&["orders", "--fn", "bump", "--r", "4", "--k", "8,16", "--reps", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|l| l.ends_with(",true")).count(), 2);
}

#[test]
fn bad_input_fails_cleanly() {
    for args in [
        vec!["run", "--fn", "logistic", "--dim", "2"],
        vec!["run", "--k", "8,4"],
        vec!["run", "--variant", "simpson"],
        vec!["run", "--fn", "nope"],
    ] {
        let out = cubestrat(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn logistic_workload_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let mut text = String::from("x1,x2,y\n");
    for i in 0..30 {
        let x = (i as f64 - 15.0) / 7.0;
        let y = if (i * 7) % 5 < 3 { 1 } else { 0 };
        text.push_str(&format!("{x},{},{y}\n", (i % 4) as f64 - 1.5));
    }
    std::fs::write(&data, text).unwrap();
    let csv = dir.path().join("l.csv");
    let common = ["--fn", "logistic", "--dataset", data.to_str().unwrap(), "--dim", "3", "--variant", "vanishing", "--r", "3", "--k", "4,16", "--reps", "20", "--zscore"];
    let mut args = common.to_vec();
    args.extend(["--scale", "hessian"]);
    run_to(&csv, &args);
    let rows = read_rows(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.rel_error.is_finite() && r.rel_error > 0.0));
    assert!(rows[1].rel_error < rows[0].rel_error, "{rows:?}");
}
