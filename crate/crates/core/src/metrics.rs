//! Lesion versus contralateral statistics and recovery errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DomainMask, Grid3, ScalarField};
use crate::io::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MidlineAxis {
    X,
    Y,
}

impl MidlineAxis {
    fn index(self) -> usize {
        match self {
            MidlineAxis::X => 0,
            MidlineAxis::Y => 1,
        }
    }
}

/// A lesion and its mirror image across the midline.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPair {
    pub grid: Grid3,
    pub lesion: Vec<bool>,
    pub c_lesion: Vec<bool>,
    pub midline_axis: MidlineAxis,
    pub midline_index: usize,
    /// Lesion voxels whose reflection left the grid or the domain.
    pub dropped: usize,
}

impl RegionPair {
    pub fn lesion_values(&self, f: &ScalarField) -> Vec<f64> {
        pick(f, &self.lesion)
    }

    pub fn c_lesion_values(&self, f: &ScalarField) -> Vec<f64> {
        pick(f, &self.c_lesion)
    }
}

fn pick(f: &ScalarField, sel: &[bool]) -> Vec<f64> {
    f.as_slice()
        .iter()
        .zip(sel)
        .filter(|(_, &s)| s)
        .map(|(&v, _)| v)
        .collect()
}

/// Reflects `lesion` through `index` along `axis`: `x ↦ 2·index − x`.
pub fn mirror_mask(
    lesion: &[bool],
    axis: MidlineAxis,
    index: usize,
    domain: &DomainMask,
) -> Result<RegionPair> {
    let grid = *domain.grid();
    if lesion.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "lesion has {} voxels, grid needs {}",
            lesion.len(),
            grid.len()
        )));
    }
    let a = axis.index();
    let n = grid.dims()[a] as isize;
    let mut c_lesion = vec![false; grid.len()];
    let mut dropped = 0;
    for idx in (0..grid.len()).filter(|&i| lesion[i]) {
        let mut c = grid.coords(idx);
        let r = 2 * index as isize - c[a] as isize;
        if r < 0 || r >= n {
            dropped += 1;
            continue;
        }
        c[a] = r as usize;
        let j = grid.index(c[0], c[1], c[2]);
        if domain.is_inside(j) {
            c_lesion[j] = true;
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("mirroring dropped {dropped} lesion voxels");
    }
    let overlap = lesion.iter().zip(&c_lesion).filter(|(a, b)| **a && **b).count();
    if overlap > 0 {
        return Err(Error::Parameter(format!(
            "lesion and its mirror image overlap in {overlap} voxels"
        )));
    }
    if !lesion.iter().any(|&b| b) || !c_lesion.iter().any(|&b| b) {
        return Err(Error::Parameter("lesion and mirrored region must be non-empty".into()));
    }
    Ok(RegionPair {
        grid,
        lesion: lesion.to_vec(),
        c_lesion,
        midline_axis: axis,
        midline_index: index,
        dropped,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn nonempty(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(Error::UndefinedMetric(format!(
            "need at least {min} values per region, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `min(m_l / m_c, m_c / m_l)` of the region means.
pub fn rel_mean(lesion: &[f64], c_lesion: &[f64]) -> Result<f64> {
    nonempty(lesion, c_lesion, 1)?;
    let (a, b) = (mean(lesion), mean(c_lesion));
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "relative mean needs positive means, got {a} and {b}"
        )));
    }
    Ok((a / b).min(b / a))
}

/// `min` of the two ratios of sample standard deviations.
pub fn rel_std(lesion: &[f64], c_lesion: &[f64]) -> Result<f64> {
    nonempty(lesion, c_lesion, 2)?;
    let (a, b) = (sample_var(lesion).sqrt(), sample_var(c_lesion).sqrt());
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "relative std needs non-zero spread, got {a} and {b}"
        )));
    }
    Ok((a / b).min(b / a))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TTest {
    #[default]
    Pooled,
    Welch,
}

/// Two-sample t statistic magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TStat {
    pub abs_t: f64,
    /// Zero variance with different means: `abs_t` is `+∞`.
    pub degenerate: bool,
}

pub fn abs_t(a: &[f64], b: &[f64], test: TTest) -> Result<TStat> {
    nonempty(a, b, 2)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let diff = mean(a) - mean(b);
    let (va, vb) = (sample_var(a), sample_var(b));
    let se2 = match test {
        TTest::Pooled => {
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
            sp2 * (1.0 / na + 1.0 / nb)
        }
        TTest::Welch => va / na + vb / nb,
    };
    if se2 > 0.0 {
        Ok(TStat {
            abs_t: diff.abs() / se2.sqrt(),
            degenerate: false,
        })
    } else if diff == 0.0 {
        Ok(TStat {
            abs_t: 0.0,
            degenerate: false,
        })
    } else {
        Ok(TStat {
            abs_t: f64::INFINITY,
            degenerate: true,
        })
    }
}

/// Mean absolute error over the mask divided by the in-mask maximum of `gt`.
pub fn mae_maxnorm(est: &ScalarField, gt: &ScalarField, mask: &DomainMask) -> Result<f64> {
    est.grid().ensure_same(gt.grid(), "estimate and ground truth")?;
    gt.grid().ensure_same(mask.grid(), "mask")?;
    let n = mask.count_inside();
    if n == 0 {
        return Err(Error::UndefinedMetric("empty mask".into()));
    }
    let max = mask.values(gt).fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "ground-truth maximum must be positive, got {max}"
        )));
    }
    let sum: f64 = est
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.inside())
        .filter(|(_, &ins)| ins)
        .map(|((e, g), _)| (e - g).abs())
        .sum();
    Ok(sum / n as f64 / max)
}

/// One CSV row of region statistics for a named map.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub map: String,
    pub rel_mean: Option<f64>,
    pub rel_std: Option<f64>,
    pub abs_t: Option<f64>,
    pub n_lesion: usize,
    pub n_c_lesion: usize,
}

pub const METRIC_HEADER: [&str; 6] = ["map", "rel_mean", "rel_std", "abs_t", "n_lesion", "n_c_lesion"];

/// Statistics of `f` on a region pair; undefined metrics become `None`.
pub fn metric_row(map: &str, f: &ScalarField, pair: &RegionPair, test: TTest) -> MetricRow {
    let a = pair.lesion_values(f);
    let b = pair.c_lesion_values(f);
    MetricRow {
        map: map.into(),
        rel_mean: rel_mean(&a, &b).ok(),
        rel_std: rel_std(&a, &b).ok(),
        abs_t: abs_t(&a, &b, test).ok().map(|t| t.abs_t),
        n_lesion: a.len(),
        n_c_lesion: b.len(),
    }
}

impl MetricRow {
    pub fn cells(&self) -> Vec<Cell> {
        let opt = |v: Option<f64>| v.map(Cell::Num).unwrap_or_else(|| Cell::Text(String::new()));
        vec![
            Cell::Text(self.map.clone()),
            opt(self.rel_mean),
            opt(self.rel_std),
            opt(self.abs_t),
            Cell::from(self.n_lesion),
            Cell::from(self.n_c_lesion),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_statistics_examples() {
        assert_eq!(rel_mean(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.5);
        assert_eq!(rel_mean(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(rel_mean(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(rel_mean(&[0.0], &[1.0]).is_err());
        assert!(rel_mean(&[], &[1.0]).is_err());
        // std 2 vs 4
        let a = [0.0, 4.0];
        let b = [0.0, 8.0];
        assert!((rel_std(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!(rel_std(&[1.0, 1.0], &b).is_err());
    }

    #[test]
    fn t_statistic_edge_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(abs_t(&a, &a, TTest::Pooled).unwrap().abs_t, 0.0);
        let t = abs_t(&[0.0; 4], &[1.0; 4], TTest::Pooled).unwrap();
        assert!(t.degenerate && t.abs_t.is_infinite());
        let t = abs_t(&[2.0; 4], &[2.0; 4], TTest::Welch).unwrap();
        assert!(!t.degenerate && t.abs_t == 0.0);
        // equal sizes: pooled and Welch coincide
        let b = [2.0, 4.0, 7.0];
        let p = abs_t(&a, &b, TTest::Pooled).unwrap().abs_t;
        let w = abs_t(&a, &b, TTest::Welch).unwrap().abs_t;
        assert!((p - w).abs() < 1e-14);
    }

    #[test]
    fn mirror_examples() {
        let g = Grid3::new([10, 4, 2], [1.0; 3]).unwrap();
        let dom = DomainMask::full(g);
        let mut lesion = vec![false; g.len()];
        lesion[g.index(2, 1, 0)] = true;
        let pair = mirror_mask(&lesion, MidlineAxis::X, 5, &dom).unwrap();
        assert!(pair.c_lesion[g.index(8, 1, 0)]);
        assert_eq!(pair.dropped, 0);

        // symmetric lesion maps onto itself
        let mut sym = vec![false; g.len()];
        sym[g.index(4, 1, 0)] = true;
        sym[g.index(6, 1, 0)] = true;
        assert!(mirror_mask(&sym, MidlineAxis::X, 5, &dom).is_err());

        // edge voxel reflects out of bounds
        let mut edge = vec![false; g.len()];
        edge[g.index(0, 0, 0)] = true;
        edge[g.index(7, 0, 0)] = true;
        let pair = mirror_mask(&edge, MidlineAxis::X, 6, &dom).unwrap();
        assert_eq!(pair.dropped, 1);
        assert!(pair.c_lesion[g.index(5, 0, 0)]);

        let mut ylesion = vec![false; g.len()];
        ylesion[g.index(3, 0, 1)] = true;
        let pair = mirror_mask(&ylesion, MidlineAxis::Y, 1, &dom).unwrap();
        assert!(pair.c_lesion[g.index(3, 2, 1)]);
    }

    #[test]
    fn mae_examples() {
        let g = Grid3::new([4, 3, 2], [1.0; 3]).unwrap();
        let mask = DomainMask::full(g);
        let gt = ScalarField::from_fn(g, |x, y, z| (x + y + z) as f64);
        assert_eq!(mae_maxnorm(&gt, &gt, &mask).unwrap(), 0.0);
        let est = gt.map(|v| v + 0.6);
        assert!((mae_maxnorm(&est, &gt, &mask).unwrap() - 0.1).abs() < 1e-15);
        assert!(mae_maxnorm(&gt, &ScalarField::zeros(g), &mask).is_err());
    }
}
