use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::vocab::TokenId;

/// One model call and the updates it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTrace {
    pub step: usize,
    pub block: usize,
    pub gamma: Vec<usize>,
    pub delta: Vec<usize>,
    pub fallback: bool,
    /// Full sequence after the transition.
    pub tokens: Vec<TokenId>,
}

pub fn write_jsonl<W: Write>(mut out: W, traces: &[StepTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<StepTrace>> {
    let mut traces = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line)?);
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema() {
        let t = StepTrace {
            step: 3,
            block: 1,
            gamma: vec![4, 5],
            delta: vec![],
            fallback: false,
            tokens: vec![1, 2, 3],
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[t.clone()]).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"step\":3,\"block\":1,\"gamma\":[4,5],\"delta\":[],\"fallback\":false,\"tokens\":[1,2,3]}\n"
        );
        assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![t]);
    }
}
