//! Flag value parsers shared by the subcommands.

/// A budget written as a fraction (`16/255`) or a decimal (`0.0627`),
/// required to lie strictly inside `(0, 1)`.
pub fn parse_budget(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let den: f64 = den.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            num / den
        }
        None => s.parse().map_err(|_| format!("{s:?} is not a number or fraction"))?,
    };
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("budget {s} must lie strictly between 0 and 1"))
    }
}

/// Budgets sorted ascending without duplicates.
pub fn sorted_budgets(budgets: &[f64]) -> Vec<f64> {
    let mut out = budgets.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// `HxW`, e.g. `64x64`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {s:?} must look like 64x64"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}
