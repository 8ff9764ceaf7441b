//! Ordered concentration volumes with a uniform frame interval.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{Grid3, ScalarField};

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSeries {
    grid: Grid3,
    dt_frames: f64,
    frames: Vec<ScalarField>,
    pub meta: BTreeMap<String, String>,
}

impl VolumeSeries {
    pub fn new(dt_frames: f64, frames: Vec<ScalarField>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Parameter("a series needs at least one frame".into()))?;
        if !(dt_frames > 0.0 && dt_frames.is_finite()) {
            return Err(Error::Parameter(format!(
                "frame interval must be positive, got {dt_frames}"
            )));
        }
        let grid = *first.grid();
        for f in &frames[1..] {
            grid.ensure_same(f.grid(), "series frames")?;
        }
        Ok(Self {
            grid,
            dt_frames,
            frames,
            meta: BTreeMap::new(),
        })
    }

    /// Builds a measured series, clamping negative concentrations to zero.
    /// Returns the series and the number of clamped values.
    pub fn ingest(dt_frames: f64, mut frames: Vec<ScalarField>) -> Result<(Self, usize)> {
        let mut clamped = 0;
        for f in &mut frames {
            if !f.is_finite() {
                return Err(Error::NonFinite("concentration frame".into()));
            }
            for v in f.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                    clamped += 1;
                }
            }
        }
        let mut s = Self::new(dt_frames, frames)?;
        if clamped > 0 {
            log::warn!("clamped {clamped} negative concentrations to zero");
        }
        s.meta
            .insert("clamped_negative".into(), clamped.to_string());
        Ok((s, clamped))
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn dt_frames(&self) -> f64 {
        self.dt_frames
    }

    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [ScalarField] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<ScalarField> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the last frame (`T` for frames `0..=T`).
    pub fn last_index(&self) -> usize {
        self.frames.len() - 1
    }

    /// Frames `start..=start + count`, keeping the frame interval.
    pub fn window(&self, start: usize, count: usize) -> Result<Self> {
        if start + count >= self.frames.len() {
            return Err(Error::Parameter(format!(
                "window {start}..={} exceeds {} frames",
                start + count,
                self.frames.len()
            )));
        }
        let mut s = Self::new(self.dt_frames, self.frames[start..=start + count].to_vec())?;
        s.meta = self.meta.clone();
        Ok(s)
    }
}
