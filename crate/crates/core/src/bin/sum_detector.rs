//! Reference external detector: the score of a window is the sum of its
//! entries.
//!
//! Speaks the line-delimited JSON protocol used by `ExternalDetector`.
//! `--crash-after N` exits after serving N score requests, for exercising
//! restarts.

use std::io::{self, BufRead, Write};

use serde_json::{json, Value};

fn main() -> io::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut crash_after: Option<usize> = None;
    while let Some(a) = args.next() {
        if a == "--crash-after" {
            crash_after = args.next().and_then(|v| v.parse().ok());
        }
    }
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut served = 0usize;
    for line in stdin.lock().lines() {
        let line = line?;
        let Ok(req) = serde_json::from_str::<Value>(&line) else {
            writeln!(out, "{}", json!({"error": "malformed request"}))?;
            out.flush()?;
            continue;
        };
        let reply = match req["type"].as_str() {
            Some("hello") => json!({"name": "sum", "version": "1"}),
            Some("score") => {
                if crash_after.is_some_and(|n| served >= n) {
                    std::process::exit(3);
                }
                served += 1;
                let scores: Vec<f64> = req["windows"]
                    .as_array()
                    .map(|ws| {
                        ws.iter()
                            .map(|w| w.as_array().map_or(0.0, |v| v.iter().filter_map(Value::as_f64).sum()))
                            .collect()
                    })
                    .unwrap_or_default();
                json!({"scores": scores})
            }
            _ => json!({"error": "unknown request"}),
        };
        writeln!(out, "{reply}")?;
        out.flush()?;
    }
    Ok(())
}
