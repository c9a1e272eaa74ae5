use std::collections::BTreeMap;
use std::io::Write;

use super::Dataset;
use crate::{Error, Result};

/// Box-plot summary of LCE targets for one component count.
///
/// Quartiles use linear interpolation between order statistics. Points
/// beyond 1.5 IQR from the box are outliers; `min` and `max` are the
/// whisker ends, i.e. the extremes of the remaining points.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub component_count: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub(crate) fn box_of(component_count: usize, mut values: Vec<f64>) -> BoxStats {
    values.sort_by(f64::total_cmp);
    let q25 = quantile(&values, 0.25);
    let median = quantile(&values, 0.5);
    let q75 = quantile(&values, 0.75);
    let iqr = q75 - q25;
    let (lo_fence, hi_fence) = (q25 - 1.5 * iqr, q75 + 1.5 * iqr);
    let (inside, outliers): (Vec<f64>, Vec<f64>) = values
        .iter()
        .partition(|&&v| v >= lo_fence && v <= hi_fence);
    BoxStats {
        component_count,
        min: inside[0],
        q25,
        median,
        q75,
        max: inside[inside.len() - 1],
        outliers,
    }
}

/// LCE distribution per component count, ascending by count.
pub fn boxplot_stats(d: &Dataset) -> Result<Vec<BoxStats>> {
    if d.is_empty() {
        return Err(Error::Empty(
            "box-plot statistics need at least one formulation".into(),
        ));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for f in &d.formulations {
        groups
            .entry(f.components.len())
            .or_default()
            .push(f.target_lce);
    }
    Ok(groups.into_iter().map(|(k, v)| box_of(k, v)).collect())
}

/// CSV with header `component_count,min,q25,median,q75,max,outliers`;
/// outliers are `;`-separated.
pub fn write_boxplot_csv<W: Write>(stats: &[BoxStats], mut w: W) -> std::io::Result<()> {
    writeln!(w, "component_count,min,q25,median,q75,max,outliers")?;
    for s in stats {
        let outliers: Vec<String> = s.outliers.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.component_count,
            s.min,
            s.q25,
            s.median,
            s.q75,
            s.max,
            outliers.join(";")
        )?;
    }
    Ok(())
}
