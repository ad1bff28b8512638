use std::path::Path;

use super::{FeatureError, Result};
use crate::imagecore::{self, CellMask};

/// Per-pixel organization classes, in label order 0..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OrgClass {
    Background = 0,
    DiffuseOther = 1,
    Fibers = 2,
    DisorganizedPuncta = 3,
    OrganizedPuncta = 4,
    OrganizedZdiscs = 5,
}

pub const CLASS_COUNT: usize = 6;

impl OrgClass {
    pub const ALL: [OrgClass; CLASS_COUNT] = [
        OrgClass::Background,
        OrgClass::DiffuseOther,
        OrgClass::Fibers,
        OrgClass::DisorganizedPuncta,
        OrgClass::OrganizedPuncta,
        OrgClass::OrganizedZdiscs,
    ];

    pub fn from_label(label: u8) -> Result<Self> {
        Self::ALL
            .get(label as usize)
            .copied()
            .ok_or(FeatureError::UnknownLabel(label))
    }
}

/// Label image with values in `0..6`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(FeatureError::Image(imagecore::ImageError::Length {
                height,
                width,
                got: labels.len(),
            }));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(FeatureError::UnknownLabel(bad));
        }
        Ok(Self { height, width, labels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, w, labels) = imagecore::load_labels(path)?;
        Self::new(h, w, labels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        imagecore::save_luma8(path, self.width, self.height, self.labels.clone())?;
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Share of in-mask pixels carrying each label, in [`OrgClass::ALL`] order.
pub fn class_fractions(map: &ClassMap, mask: &CellMask) -> Result<[f64; CLASS_COUNT]> {
    mask.ensure_matches(map.dims())?;
    let mut counts = [0usize; CLASS_COUNT];
    for (&l, &m) in map.labels.iter().zip(mask.bits()) {
        if m {
            counts[l as usize] += 1;
        }
    }
    let total = counts.iter().sum::<usize>() as f64;
    Ok(counts.map(|c| c as f64 / total))
}
