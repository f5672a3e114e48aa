use crate::error::{Error, Result};

/// Splits `channels` into per-group chunks proportional to `weights`, in
/// multiples of `unit`.
///
/// Every group first receives one unit. With `T = channels / unit` total units
/// and `S = Σ weights`, group `i` is then sized to `max(1, ⌊w_i·T/S⌋)` units,
/// which is the allocation the sequential descending-weight pass produces when
/// the ratio divides evenly. Units still unassigned go one at a time to the
/// group furthest below its exact share `w_i·T/S`; any excess created by the
/// one-unit floor is taken back from the group furthest above its share. Ties
/// favour the larger weight, then the lower index.
///
/// The result is returned in argument order, sums to `channels`, every entry
/// is a positive multiple of `unit`, and a strictly heavier group never gets
/// fewer channels than a lighter one.
pub fn divide_channels(channels: usize, unit: usize, weights: &[usize]) -> Result<Vec<usize>> {
    if unit == 0 || channels % unit != 0 {
        return Err(Error::config(
            "signal_channels",
            format!("{channels} channels are not divisible by unit size {unit}"),
        ));
    }
    let total = channels / unit;
    if weights.is_empty() || total < weights.len() {
        return Err(Error::config(
            "signal_channels",
            format!(
                "{total} units of {unit} channels cannot cover {} weight groups",
                weights.len()
            ),
        ));
    }
    if weights.iter().any(|&w| w == 0) {
        return Err(Error::config("signal_channels", "weights must be positive"));
    }

    let sum: i128 = weights.iter().map(|&w| w as i128).sum();
    let total_i = total as i128;
    let mut units: Vec<i128> = weights
        .iter()
        .map(|&w| (w as i128 * total_i / sum).max(1))
        .collect();
    // deficit_i = (exact share - units_i) · S, kept as an integer
    let deficit = |i: usize, u: &[i128]| weights[i] as i128 * total_i - u[i] * sum;
    let by_priority = |a: &(usize, i128), b: &(usize, i128)| {
        a.1.cmp(&b.1)
            .then(weights[a.0].cmp(&weights[b.0]))
            .then(b.0.cmp(&a.0))
    };

    let mut assigned: i128 = units.iter().sum();
    while assigned < total_i {
        let (i, _) = (0..units.len())
            .map(|i| (i, deficit(i, &units)))
            .max_by(by_priority)
            .expect("non-empty");
        units[i] += 1;
        assigned += 1;
    }
    while assigned > total_i {
        let (i, _) = (0..units.len())
            .filter(|&i| units[i] > 1)
            .map(|i| (i, deficit(i, &units)))
            .min_by(by_priority)
            .expect("total >= groups leaves a reducible group");
        units[i] -= 1;
        assigned -= 1;
    }
    Ok(units.into_iter().map(|u| u as usize * unit).collect())
}
