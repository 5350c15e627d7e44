use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of a plain ViT encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
}

impl ViTConfig {
    /// ViT-B at a 512×512 input.
    pub fn vit_b() -> Self {
        Self {
            img_size: 512,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_hidden: 3072,
        }
    }

    /// Smallest useful shape: 4 tokens of width 8, two blocks.
    pub fn micro() -> Self {
        Self {
            img_size: 8,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_hidden: 32,
        }
    }

    /// Training-scale toy: 16 tokens of width 32, four blocks.
    pub fn tiny() -> Self {
        Self {
            img_size: 32,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 32,
            depth: 4,
            num_heads: 2,
            mlp_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.img_size,
            self.patch_size,
            self.in_channels,
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.mlp_hidden,
        ];
        if positive.contains(&0) {
            return invalid(format!("all ViT dimensions must be positive: {self:?}"));
        }
        if !self.img_size.is_multiple_of(self.patch_size) {
            return invalid(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return invalid(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    /// Token count `k`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_arithmetic() {
        let c = ViTConfig::micro();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 4);
        assert_eq!(ViTConfig::vit_b().tokens(), 1024);
        assert_eq!(ViTConfig::vit_b().patch_dim(), 768);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ViTConfig::micro();
        c.img_size = 10;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::micro();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }
}
