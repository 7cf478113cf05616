use serde::{Deserialize, Serialize};

use crate::config::{Section, SectionReader};
use crate::error::{Error, Result};
use crate::selector::{attended_count, validate_ratio};
use crate::tosa_layer::SkipScope;

/// Architecture and layer schedule of a vision transformer.
///
/// `tosa_layers` holds 1-based layer numbers. Every selective layer reads
/// the pre-softmax maps of the standard layer right before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub tosa_layers: Vec<usize>,
    pub ratio: f64,
    pub scope: SkipScope,
    /// Selector hidden channels `C`.
    pub selector_hidden: usize,
    /// Selector kernel width `k` (odd).
    pub selector_width: usize,
}

impl Default for ModelConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            dim: 64,
            heads: 4,
            depth: 6,
            num_classes: 4,
            tosa_layers: vec![2, 4, 6],
            ratio: 0.8,
            scope: SkipScope::AttentionOnly,
            selector_hidden: 16,
            selector_width: 3,
        }
    }
}

/// Fields that change parameter shapes. Ratio and scope only steer routing.
const ARCHITECTURE_KEYS: [&str; 10] = [
    "image_size",
    "patch_size",
    "channels",
    "dim",
    "heads",
    "depth",
    "num_classes",
    "tosa_layers",
    "selector_hidden",
    "selector_width",
];

impl ModelConfig {
    /// DeiT-Tiny shape: 224² images, patch 16, D=192, 3 heads, 12 layers,
    /// selective layers at 2, 4, 6, 8 and 10.
    pub fn deit_tiny() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 192,
            heads: 3,
            depth: 12,
            num_classes: 1000,
            tosa_layers: vec![2, 4, 6, 8, 10],
            ratio: 0.8,
            scope: SkipScope::AttentionOnly,
            selector_hidden: 12,
            selector_width: 3,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Tokens each head attends to in a selective layer.
    pub fn attended(&self) -> usize {
        attended_count(self.ratio, self.tokens())
    }

    pub fn is_tosa(&self, layer: usize) -> bool {
        self.tosa_layers.contains(&layer)
    }

    /// The same architecture with every layer standard.
    pub fn all_standard(&self) -> Self {
        ModelConfig {
            tosa_layers: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("num_classes", self.num_classes),
            ("selector_hidden", self.selector_hidden),
            ("selector_width", self.selector_width),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.selector_width.is_multiple_of(2) {
            return Err(Error::config(format!(
                "selector_width must be odd, got {}",
                self.selector_width
            )));
        }
        validate_ratio(self.ratio)?;
        let mut seen = Vec::new();
        for &i in &self.tosa_layers {
            if i < 2 || i > self.depth {
                return Err(Error::config(format!(
                    "selective layer {i} outside [2, {}]: it needs a standard layer before it",
                    self.depth
                )));
            }
            if seen.contains(&i) {
                return Err(Error::config(format!("selective layer {i} listed twice")));
            }
            seen.push(i);
        }
        for &i in &self.tosa_layers {
            if self.is_tosa(i - 1) {
                return Err(Error::config(format!(
                    "selective layers {} and {i} are consecutive; layer {i} needs a standard predecessor",
                    i - 1
                )));
            }
        }
        Ok(())
    }

    /// Names of architecture fields that differ from `other`.
    pub fn architecture_mismatch(&self, other: &ModelConfig) -> Vec<&'static str> {
        let a = self.to_section();
        let b = other.to_section();
        ARCHITECTURE_KEYS
            .iter()
            .copied()
            .filter(|k| a.get(k).map(|e| &e.value) != b.get(k).map(|e| &e.value))
            .collect()
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("model");
        s.push("image_size", self.image_size);
        s.push("patch_size", self.patch_size);
        s.push("channels", self.channels);
        s.push("dim", self.dim);
        s.push("heads", self.heads);
        s.push("depth", self.depth);
        s.push("num_classes", self.num_classes);
        let layers: Vec<String> = self.tosa_layers.iter().map(|i| i.to_string()).collect();
        s.push("tosa_layers", layers.join(","));
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        s.push("ratio", self.ratio);
        s.push("skip_scope", self.scope);
        s.push("selector_hidden", self.selector_hidden);
        s.push("selector_width", self.selector_width);
        s
    }

    /// Reads a `[model]` section over `base`, rejecting unknown keys.
    pub fn from_section(section: &Section, base: &ModelConfig) -> Result<Self> {
        let mut r = section.reader();
        let cfg = Self::read(&mut r, base)?;
        r.finish()?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("[{}] {msg}", section.name)),
            other => other,
        })?;
        Ok(cfg)
    }

    fn read(r: &mut SectionReader<'_>, base: &ModelConfig) -> Result<Self> {
        let ratio: f64 = r.or("ratio", base.ratio)?;
        if validate_ratio(ratio).is_err() {
            return Err(r.reject("ratio", "must lie in (0, 1]"));
        }
        Ok(ModelConfig {
            image_size: r.or("image_size", base.image_size)?,
            patch_size: r.or("patch_size", base.patch_size)?,
            channels: r.or("channels", base.channels)?,
            dim: r.or("dim", base.dim)?,
            heads: r.or("heads", base.heads)?,
            depth: r.or("depth", base.depth)?,
            num_classes: r.or("num_classes", base.num_classes)?,
            tosa_layers: r.list("tosa_layers")?.unwrap_or_else(|| base.tosa_layers.clone()),
            ratio,
            scope: r.or("skip_scope", base.scope)?,
            selector_hidden: r.or("selector_hidden", base.selector_hidden)?,
            selector_width: r.or("selector_width", base.selector_width)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Document;

    #[test]
    fn desk_default_has_65_tokens() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 65);
        assert_eq!(c.attended(), 52);
    }

    #[test]
    fn deit_tiny_has_197_tokens() {
        let c = ModelConfig::deit_tiny();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 197);
    }

    #[test]
    fn schedule_validation() {
        let mut c = ModelConfig::default();
        c.tosa_layers = vec![1];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.tosa_layers = vec![2, 3];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.tosa_layers = vec![7];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.tosa_layers = vec![2, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.tosa_layers = vec![];
        c.validate().unwrap();
        c.image_size = 30;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn section_round_trip_is_exact() {
        let mut c = ModelConfig::default();
        c.ratio = 0.1 + 0.2;
        c.scope = SkipScope::FullLayer;
        let doc = Document {
            sections: vec![c.to_section()],
        };
        let parsed = Document::parse(&doc.render()).unwrap();
        let back = ModelConfig::from_section(parsed.section("model").unwrap(), &ModelConfig::default()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.ratio.to_bits(), c.ratio.to_bits());
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let doc = Document::parse("[model]\ndim = 64\nheads = four\n").unwrap();
        let err = ModelConfig::from_section(doc.section("model").unwrap(), &ModelConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("'heads'"), "{err}");

        let doc = Document::parse("[model]\nratio = 1.5\n").unwrap();
        let err = ModelConfig::from_section(doc.section("model").unwrap(), &ModelConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("'ratio'"), "{err}");
    }

    #[test]
    fn mismatch_ignores_routing_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.ratio = 0.5;
        b.scope = SkipScope::FullLayer;
        assert!(a.architecture_mismatch(&b).is_empty());
        b.dim = 32;
        b.tosa_layers = vec![2];
        assert_eq!(a.architecture_mismatch(&b), vec!["dim", "tosa_layers"]);
    }
}
