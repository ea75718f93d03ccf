use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::{Example, Split, TaskSpec};

/// Writes `count` examples of `split` as JSON lines `{"source":[…],"target":[…]}`.
pub fn gen_dataset(task: &TaskSpec, split: Split, count: usize, mut out: impl Write) -> Result<()> {
    task.validate()?;
    for ex in task.dataset(split, count) {
        serde_json::to_writer(&mut out, &ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`gen_dataset`]. Blank lines are skipped.
pub fn read_dataset(input: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line).map_err(|e| Error::Usage(format!("dataset line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
