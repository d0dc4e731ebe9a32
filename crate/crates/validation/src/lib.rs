//! Runner for the workspace acceptance checks.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use tembed_cli::RunConfig;

/// One numbered check. `run` returns a one-line summary of what it
/// measured, or the reason it failed.
pub struct Check {
    pub id: usize,
    pub name: &'static str,
    pub run: fn() -> Result<String, String>,
}

/// Directory holding the configs shipped with the CLI.
pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs")
}

/// A bundled config, resolved without a seed override.
pub fn bundled(name: &str) -> RunConfig {
    let path = configs_dir().join(format!("{name}.json"));
    RunConfig::load(&path)
        .and_then(|c| c.resolve(None))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Fail with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Run the checks selected by `filter` (all when empty), printing one
/// PASS/FAIL line each. Returns whether every selected check passed.
pub fn run_checks(checks: &[Check], filter: &[usize]) -> bool {
    let mut failed = Vec::new();
    for c in checks.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {} ({secs:.1}s): {detail}", c.id, c.name),
            Err(detail) => {
                println!("FAIL {:>2} {} ({secs:.1}s): {detail}", c.id, c.name);
                failed.push(c.id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    failed.is_empty()
}
