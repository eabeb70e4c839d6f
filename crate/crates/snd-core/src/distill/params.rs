//! Flat parameter vectors with a named segment layout shared by student and
//! teacher.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toy patch encoder dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input image side (H = W), pixels.
    pub image_size: usize,
    /// Patch side p; must divide the image size.
    pub patch_size: usize,
    /// Input channels (3 for rendered color).
    pub channels_in: usize,
    /// Output feature channels C.
    pub embed_dim: usize,
    /// Width of the per-token MLP.
    pub hidden_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.channels_in == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Tokens per image side (h = H / p).
    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels_in
    }
}

/// Prototype head dimensions (MLP -> bottleneck -> L2 norm -> prototypes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// MLP depth; the layout below realizes exactly 3.
    pub layers: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers != 3 {
            return Err(Error::InvalidConfig(format!(
                "head layout is fixed at 3 layers (got {})",
                self.layers
            )));
        }
        if self.hidden == 0 || self.bottleneck == 0 || self.prototypes == 0 {
            return Err(Error::InvalidConfig("head dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

/// One named, contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Fan-in used for init scaling (0 for biases).
    pub fan_in: usize,
}

/// Segment names in layout order, with offsets partitioning the vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    segments: Vec<Segment>,
    total: usize,
}

impl SegmentMap {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let e = &cfg.encoder;
        let h = &cfg.head;
        let (c, pd, dh) = (e.embed_dim, e.patch_dim(), e.hidden_dim);
        let (hh, b, k) = (h.hidden, h.bottleneck, h.prototypes);
        let defs: Vec<(&str, usize, usize)> = vec![
            ("embed.w", c * pd, pd),
            ("embed.b", c, 0),
            ("enc1.w", dh * c, c),
            ("enc1.b", dh, 0),
            ("enc2.w", c * dh, dh),
            ("enc2.b", c, 0),
            ("head1.w", hh * c, c),
            ("head1.b", hh, 0),
            ("head2.w", hh * hh, hh),
            ("head2.b", hh, 0),
            ("head3.w", b * hh, hh),
            ("head3.b", b, 0),
            ("proto.w", k * b, b),
        ];
        let mut segments = Vec::with_capacity(defs.len());
        let mut offset = 0;
        for (name, len, fan_in) in defs {
            segments.push(Segment {
                name: name.to_string(),
                offset,
                len,
                fan_in,
            });
            offset += len;
        }
        Self {
            segments,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> &Segment {
        self.segments
            .iter()
            .rev()
            .find(|s| i >= s.offset)
            .expect("index outside layout")
    }

    /// Encoder-only segments (everything the `encode` pass reads).
    pub fn is_encoder_segment(name: &str) -> bool {
        name.starts_with("embed.") || name.starts_with("enc")
    }
}

/// Flat parameter vector with a shared named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Arc<SegmentMap>,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: Arc<SegmentMap>) -> Self {
        let data = vec![0.0; layout.total_len()];
        Self { layout, data }
    }

    pub fn from_data(layout: Arc<SegmentMap>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "data length {} != layout total {}",
                data.len(),
                layout.total_len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::LayoutMismatch("non-finite parameter".into()));
        }
        Ok(Self { layout, data })
    }

    /// Random init: weights ~ N(0, 1/fan_in), biases zero. Deterministic in
    /// the seed; student and teacher start from the same draw.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(SegmentMap::for_model(cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.total_len()];
        for seg in layout.segments() {
            if seg.fan_in == 0 {
                continue; // biases stay zero
            }
            let normal = Normal::new(0.0, 1.0 / (seg.fan_in as f64).sqrt()).unwrap();
            for v in &mut data[seg.offset..seg.offset + seg.len] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<SegmentMap> {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn seg(&self, name: &str) -> &[f64] {
        let s = self
            .layout
            .find(name)
            .unwrap_or_else(|| panic!("unknown segment '{name}'"));
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }
}
