//! Per-step loss CSV: `step,seg,style,content,pfr,adv_g,adv_d,total`.
//!
//! Values are written in shortest round-trip form, so parsing a log gives
//! back exactly the logged numbers.

use pfr_core::losses::LossBreakdown;

pub const HEADER: &str = "step,seg,style,content,pfr,adv_g,adv_d,total";

pub fn format_row(step: usize, l: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{},{},{}",
        l.seg, l.style, l.content, l.pfr, l.adv_g, l.adv_d, l.total
    )
}

/// Parses a whole log. Returns `(step, breakdown)` rows.
pub fn parse(text: &str) -> Result<Vec<(usize, LossBreakdown)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err("runlog: missing or wrong header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("runlog line {}: expected 8 fields", i + 2));
            }
            let num = |k: usize| -> Result<f64, String> {
                f[k].parse().map_err(|_| format!("runlog line {}: bad number {:?}", i + 2, f[k]))
            };
            let step = f[0]
                .parse()
                .map_err(|_| format!("runlog line {}: bad step", i + 2))?;
            Ok((
                step,
                LossBreakdown {
                    seg: num(1)?,
                    style: num(2)?,
                    content: num(3)?,
                    pfr: num(4)?,
                    adv_g: num(5)?,
                    adv_d: num(6)?,
                    total: num(7)?,
                },
            ))
        })
        .collect()
}
