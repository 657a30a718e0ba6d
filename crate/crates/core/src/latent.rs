//! Sub-vector layout of object and force latents.
//!
//! A latent is a concatenation of equally sized sub-vectors, each tagged by
//! which of mutability (M), causal relevance (C) and control relevance (K) it
//! carries. Storage order:
//!
//! | slot | 0   | 1   | 2   | 3   | 4   | 5   | 6   | 7 (objects only) |
//! |------|-----|-----|-----|-----|-----|-----|-----|------------------|
//! | tags | MCK | MC- | M-K | M-- | -CK | -C- | --K | ---              |
//!
//! The mutable slots therefore form a contiguous prefix.

use serde::{Deserialize, Serialize};

/// Tags of one sub-vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tags {
    pub mutable: bool,
    pub causal: bool,
    pub control: bool,
}

pub const SLOT_TAGS: [Tags; 8] = {
    const fn t(mutable: bool, causal: bool, control: bool) -> Tags {
        Tags { mutable, causal, control }
    }
    [
        t(true, true, true),
        t(true, true, false),
        t(true, false, true),
        t(true, false, false),
        t(false, true, true),
        t(false, true, false),
        t(false, false, true),
        t(false, false, false),
    ]
};

pub const OBJECT_SLOTS: usize = 8;
pub const FORCE_SLOTS: usize = 7;

/// Slot count and sub-vector width of one latent kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub slots: usize,
    pub sub: usize,
}

impl Layout {
    pub const fn object(sub: usize) -> Self {
        Layout { slots: OBJECT_SLOTS, sub }
    }

    pub const fn force(sub: usize) -> Self {
        Layout { slots: FORCE_SLOTS, sub }
    }

    pub fn width(&self) -> usize {
        self.slots * self.sub
    }

    pub fn slot_range(&self, slot: usize) -> std::ops::Range<usize> {
        slot * self.sub..(slot + 1) * self.sub
    }

    /// Coordinates of every slot whose tags satisfy `pred`, in storage order.
    pub fn cols(&self, pred: impl Fn(Tags) -> bool) -> Vec<usize> {
        (0..self.slots)
            .filter(|&s| pred(SLOT_TAGS[s]))
            .flat_map(|s| self.slot_range(s))
            .collect()
    }

    pub fn mutable(&self) -> Vec<usize> {
        self.cols(|t| t.mutable)
    }

    pub fn immutable(&self) -> Vec<usize> {
        self.cols(|t| !t.mutable)
    }

    pub fn causal(&self) -> Vec<usize> {
        self.cols(|t| t.causal)
    }

    pub fn non_causal(&self) -> Vec<usize> {
        self.cols(|t| !t.causal)
    }

    pub fn control(&self) -> Vec<usize> {
        self.cols(|t| t.control)
    }

    pub fn non_control(&self) -> Vec<usize> {
        self.cols(|t| !t.control)
    }

    /// Width of each of the M, C and K selections.
    pub fn tagged_width(&self) -> usize {
        4 * self.sub
    }
}

fn gather(v: &[f32], cols: &[usize]) -> Vec<f32> {
    cols.iter().map(|&c| v[c]).collect()
}

macro_rules! latent_type {
    ($(#[$doc:meta])* $name:ident, $ctor:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            pub layout: Layout,
            pub data: Vec<f32>,
        }

        impl $name {
            pub fn new(sub: usize, data: Vec<f32>) -> crate::Result<Self> {
                let layout = Layout::$ctor(sub);
                if data.len() != layout.width() {
                    return Err(crate::Error::Shape(format!(
                        "latent needs {} values, got {}",
                        layout.width(),
                        data.len()
                    )));
                }
                Ok($name { layout, data })
            }

            pub fn slot(&self, s: usize) -> &[f32] {
                &self.data[self.layout.slot_range(s)]
            }

            pub fn mutable(&self) -> Vec<f32> {
                gather(&self.data, &self.layout.mutable())
            }

            pub fn immutable(&self) -> Vec<f32> {
                gather(&self.data, &self.layout.immutable())
            }

            pub fn causal(&self) -> Vec<f32> {
                gather(&self.data, &self.layout.causal())
            }

            pub fn control(&self) -> Vec<f32> {
                gather(&self.data, &self.layout.control())
            }
        }
    };
}

latent_type!(
    /// Object latent: eight sub-vectors.
    ObjectLatent,
    object
);
latent_type!(
    /// Force latent: seven sub-vectors (no all-absent slot).
    ForceLatent,
    force
);
