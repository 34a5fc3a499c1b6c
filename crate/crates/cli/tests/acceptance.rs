//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any check fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::Check;

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn reproduce(fig: &str, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_glnbias"))
        .args(["reproduce", fig, "--scale", "desk", "--out"])
        .arg(out)
        .arg("--mnist-dir")
        .arg(mnist_dir())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("reproduce {fig} exited with {status}"))
    }
}

/// Rows of a schema-tagged CSV as header → field maps.
fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let Some(header) = lines.next() else { return Vec::new() };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .map(|l| cols.iter().zip(l.split(',')).map(|(k, v)| (k.to_string(), v.to_string())).collect())
        .collect()
}

type Cell = (String, String, String, String);

/// Comparison rows keyed by cell and ordered variant pair.
struct Comparisons {
    cells: BTreeSet<Cell>,
    rows: BTreeMap<(Cell, String, String), BTreeMap<String, String>>,
}

impl Comparisons {
    fn load(dir: &Path) -> Self {
        let mut cells = BTreeSet::new();
        let mut rows = BTreeMap::new();
        for r in read_csv(&dir.join("comparisons.csv")) {
            let cell = (r["n_train"].clone(), r["units"].clone(), r["contexts"].clone(), r["seed"].clone());
            cells.insert(cell.clone());
            rows.insert((cell, r["variant_a"].clone(), r["variant_b"].clone()), r);
        }
        Self { cells, rows }
    }

    /// A missing or empty field reads as `None`.
    fn get(&self, cell: &Cell, a: &str, b: &str, field: &str) -> Option<f64> {
        self.rows
            .get(&(cell.clone(), a.to_string(), b.to_string()))
            .and_then(|r| r.get(field))
            .and_then(|v| v.parse().ok())
    }

    /// Fraction of cells where `pred` holds; a cell with missing values fails.
    fn fraction(&self, pred: impl Fn(&Cell) -> Option<bool>) -> (usize, usize) {
        let hits = self.cells.iter().filter(|c| pred(c) == Some(true)).count();
        (hits, self.cells.len())
    }
}

fn share(label: &str, (hits, total): (usize, usize)) -> (bool, String) {
    let ok = total > 0 && hits * 4 >= total * 3;
    (ok, format!("{label} {hits}/{total}"))
}

fn all_of(parts: Vec<(bool, String)>) -> Check {
    let pass = parts.iter().all(|p| p.0);
    Check::new(pass, parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join("; "))
}

fn criterion_7(dir: &Path) -> Check {
    let t = Comparisons::load(dir);
    all_of(vec![
        share(
            "svm-gln err <= svm-l2 err",
            t.fraction(|c| {
                Some(t.get(c, "svm-gln", "svm-l2", "error_a")? <= t.get(c, "svm-gln", "svm-l2", "error_b")?)
            }),
        ),
        share(
            "gd/svm-gln inconsistency < baseline",
            t.fraction(|c| {
                Some(
                    t.get(c, "gd-gln", "svm-gln", "inconsistency")?
                        < t.get(c, "gd-gln", "svm-gln", "baseline_inconsistency")?,
                )
            }),
        ),
        share(
            "gd/svm-gln inconsistency < gd/svm-l2",
            t.fraction(|c| {
                Some(
                    t.get(c, "gd-gln", "svm-gln", "inconsistency")?
                        < t.get(c, "gd-gln", "svm-l2", "inconsistency")?,
                )
            }),
        ),
    ])
}

fn criterion_8(dir: &Path) -> Check {
    let t = Comparisons::load(dir);
    all_of(vec![
        share(
            "svm-lc err <= svm-rc err",
            t.fraction(|c| {
                Some(t.get(c, "svm-rc", "svm-lc", "error_b")? <= t.get(c, "svm-rc", "svm-lc", "error_a")?)
            }),
        ),
        share(
            "gd/svm-lc inconsistency < gd/svm-rc",
            t.fraction(|c| {
                Some(
                    t.get(c, "gd-relu", "svm-lc", "inconsistency")?
                        < t.get(c, "gd-relu", "svm-rc", "inconsistency")?,
                )
            }),
        ),
    ])
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(a: &Path, b: &Path) -> Check {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Check::new(false, format!("file lists differ ({} vs {} files)", fa.len(), fb.len()));
    }
    let differing: Vec<_> = fa.iter().filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok()).collect();
    match differing.first() {
        None => Check::new(!fa.is_empty(), format!("{} files identical", fa.len())),
        Some(f) => Check::new(false, format!("{} of {} files differ, first {}", differing.len(), fa.len(), f.display())),
    }
}

fn report(n: usize, start: Instant, check: Check) -> bool {
    let verdict = if check.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2}: {verdict}  {}  ({:.1}s)", check.detail, start.elapsed().as_secs_f64());
    check.pass
}

fn run(n: usize, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    report(n, start, f())
}

fn main() {
    let mut ok = true;
    ok &= run(1, common::criterion_1);
    ok &= run(2, common::criterion_2);
    ok &= run(3, common::criterion_3);
    ok &= run(4, common::criterion_4);
    ok &= run(5, common::criterion_5);
    ok &= run(6, common::criterion_6);

    let tmp = tempfile::tempdir().expect("temp dir");
    let (fig2a, fig2b, fig3) = (tmp.path().join("fig2a"), tmp.path().join("fig2b"), tmp.path().join("fig3"));
    let have_data = mnist_dir().join("train-images-idx3-ubyte.gz").exists()
        || mnist_dir().join("train-images-idx3-ubyte").exists();
    let missing = |what: &str| Check::new(false, format!("{what}: no MNIST files under {}", mnist_dir().display()));

    let start = Instant::now();
    let c7 = if !have_data {
        missing("fig2")
    } else {
        match reproduce("fig2", &fig2a) {
            Ok(()) => criterion_7(&fig2a),
            Err(e) => Check::new(false, e),
        }
    };
    ok &= report(7, start, c7);

    let start = Instant::now();
    let c8 = if !have_data {
        missing("fig3")
    } else {
        match reproduce("fig3", &fig3) {
            Ok(()) => criterion_8(&fig3),
            Err(e) => Check::new(false, e),
        }
    };
    ok &= report(8, start, c8);

    ok &= run(9, common::criterion_9);

    let start = Instant::now();
    let c10 = if !have_data {
        missing("fig2")
    } else {
        match reproduce("fig2", &fig2b) {
            Ok(()) => criterion_10(&fig2a, &fig2b),
            Err(e) => Check::new(false, e),
        }
    };
    ok &= report(10, start, c10);

    if !ok {
        std::process::exit(1);
    }
}
