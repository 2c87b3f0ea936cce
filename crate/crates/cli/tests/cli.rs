use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn samkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("SAMKIT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SPMV: &str = "x(i) = B(i,j) * c(j)";

fn write_spmv_inputs(dir: &Path) {
    fs::write(
        dir.join("B.mtx"),
        "%%MatrixMarket matrix coordinate real general\n4 4 5\n1 1 1\n2 2 2\n2 4 3\n4 1 4\n4 3 5\n",
    )
    .unwrap();
    fs::write(dir.join("c.tns"), "1 1\n2 1\n3 1\n4 1\n").unwrap();
}

#[test]
fn compile_run_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_spmv_inputs(d);
    let o = samkit(d, &["compile", "-e", SPMV, "-f", "B:ss,c:s", "-o", "g.dot"]);
    assert!(o.status.success(), "{o:?}");
    let dot = fs::read_to_string(d.join("g.dot")).unwrap();
    assert!(dot.lines().nth(1).unwrap().starts_with("// schedule: i,j"));

    let o = samkit(d, &["run", "-g", "g.dot", "-t", "B=B.mtx", "-t", "c=c.tns", "--out-dir", "out"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read_to_string(d.join("out/x.tns")).unwrap(), "1 1\n2 5\n4 9\n");

    let o = samkit(d, &["stats", "out/report.json"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("edge,kind,crd,ref,val,bv,stop,done,empty,idle,stop_fraction\n"));
    assert!(csv.lines().count() > 10);
}

#[test]
fn verify_reports_values_and_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_spmv_inputs(d);
    let o = samkit(d, &["verify", "-e", SPMV, "-t", "B=B.mtx", "-t", "c=c.tns"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "pass: x = [1, 5, 0, 9]");

    let o = samkit(d, &["verify", "-e", "x(i) = B(i,j) * c(j)", "--order", "ji", "--seeds", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));

    let o = samkit(d, &["verify", "-e", SPMV, "-t", "B=B.mtx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no binding for input `c`"));
}

#[test]
fn verify_table_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = samkit(tmp.path(), &["verify", "--table", "--seeds", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("pass: ")).count(), 14);
}

#[test]
fn generators_write_loadable_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(samkit(d, &["gen", "sparse", "--shape", "6,5", "--sparsity", "0.5", "-o", "M.mtx"]).status.success());
    assert!(samkit(d, &["gen", "urandom", "--dim", "50", "--nnz", "7", "-o", "v.tns"]).status.success());
    assert!(samkit(d, &["gen", "blocks", "--dim", "64", "--nnz", "16", "--block", "4", "--out-dir", "blk"]).status.success());
    assert_eq!(fs::read_to_string(d.join("v.tns")).unwrap().lines().count(), 7);
    assert!(d.join("blk/b.tns").exists() && d.join("blk/c.tns").exists());
    let o = samkit(d, &["verify", "-e", "y(j) = M(i,j) * v(i)", "-t", "M=M.mtx", "-t", "v=3"]);
    assert!(!o.status.success(), "v is a vector, not a scalar");
    let o = samkit(d, &["verify", "-e", "Y(i,j) = a * M(i,j)", "-t", "M=M.mtx", "-t", "a=3"]);
    assert!(o.status.success(), "{o:?}");

    // the seed comes from the environment when not given
    let a = fs::read_to_string(d.join("M.mtx")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_samkit"))
        .args(["gen", "sparse", "--shape", "6,5", "--sparsity", "0.5", "-o", "N.mtx"])
        .current_dir(d)
        .env("SAMKIT_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(fs::read_to_string(d.join("N.mtx")).unwrap(), a);
}

#[test]
fn bench_table1_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = samkit(tmp.path(), &["bench", "table1"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert_eq!(csv.lines().next().unwrap(), "name,schedule,scan,repeat,intersect,union,alu,reduce,crddrop,write,array");
    assert_eq!(csv.lines().count(), 15);
}
