use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

/// One intermediate feature map tapped at a stage boundary.
#[derive(Clone, Copy, Debug)]
pub struct StageFeature<'t> {
    pub var: Var<'t>,
    pub layout: Layout,
    /// 1-based stage index.
    pub stage: usize,
    pub source: Source,
}

impl<'t> StageFeature<'t> {
    pub fn new(var: Var<'t>, layout: Layout, stage: usize, source: Source) -> Result<Self> {
        layout.check_rank(&var.shape())?;
        if !(1..=4).contains(&stage) {
            return Err(Error::invalid(format!("stage must be 1..=4, got {stage}")));
        }
        Ok(Self {
            var,
            layout,
            stage,
            source,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var.shape()
    }

    /// Channel extent.
    pub fn channels(&self) -> usize {
        self.shape()[self.layout.channel_axis()]
    }

    /// Extents of the axes the spectral transform runs along.
    pub fn spatial_extents(&self) -> Vec<usize> {
        let s = self.shape();
        self.layout.transformed_axes().iter().map(|&a| s[a]).collect()
    }
}
