use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Arrangement of a feature block.
///
/// `Seq` is `(batch, tokens, channels)`; `Grid` is `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    Seq,
    Grid,
}

impl Layout {
    pub fn rank(self) -> usize {
        match self {
            Layout::Seq => 3,
            Layout::Grid => 4,
        }
    }

    /// Axes the spectral transform runs along.
    pub fn transformed_axes(self) -> &'static [usize] {
        match self {
            Layout::Seq => &[1],
            Layout::Grid => &[2, 3],
        }
    }

    /// Channel axis.
    pub fn channel_axis(self) -> usize {
        match self {
            Layout::Seq => 2,
            Layout::Grid => 1,
        }
    }

    pub fn check_rank(self, shape: &[usize]) -> Result<(), Error> {
        if shape.len() != self.rank() {
            return Err(Error::invalid(format!(
                "{self} layout expects rank {}, got shape {shape:?}",
                self.rank()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero-length axis in {shape:?}")));
        }
        Ok(())
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Seq => "SEQ",
            Layout::Grid => "GRID",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "seq" => Ok(Layout::Seq),
            "grid" => Ok(Layout::Grid),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}
