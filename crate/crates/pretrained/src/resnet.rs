//! Torchvision-layout ResNet whose every op has a backward pass.

use candle_core::{Module, ModuleT, Result, Tensor, D};
use candle_nn::{batch_norm, conv2d_no_bias, linear, BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder};

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    conv2d_no_bias(cin, cout, k, cfg, vb)
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder, conv_name: &str, bn_name: &str) -> Result<Self> {
        Ok(Self {
            conv: conv(cin, cout, k, stride, vb.pp(conv_name))?,
            bn: batch_norm(cout, 1e-5, vb.pp(bn_name))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        // stored batch statistics, never batch estimates
        self.bn.forward_t(&self.conv.forward(xs)?, false)
    }
}

struct Block {
    convs: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    fn new(cin: usize, width: usize, stride: usize, bottleneck: bool, vb: VarBuilder) -> Result<Self> {
        let (convs, cout) = if bottleneck {
            let out = width * 4;
            (
                vec![
                    ConvBn::new(cin, width, 1, 1, vb.clone(), "conv1", "bn1")?,
                    ConvBn::new(width, width, 3, stride, vb.clone(), "conv2", "bn2")?,
                    ConvBn::new(width, out, 1, 1, vb.clone(), "conv3", "bn3")?,
                ],
                out,
            )
        } else {
            (
                vec![
                    ConvBn::new(cin, width, 3, stride, vb.clone(), "conv1", "bn1")?,
                    ConvBn::new(width, width, 3, 1, vb.clone(), "conv2", "bn2")?,
                ],
                width,
            )
        };
        let downsample = if stride != 1 || cin != cout {
            Some(ConvBn::new(cin, cout, 1, stride, vb.pp("downsample"), "0", "1")?)
        } else {
            None
        };
        Ok(Self { convs, downsample })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let skip = match &self.downsample {
            Some(d) => d.forward(xs)?,
            None => xs.clone(),
        };
        (h + skip)?.relu()
    }
}

/// 3×3 max pooling, stride 2, padding 1.
fn max_pool_3x3_s2(xs: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    let p = xs.pad_with_same(D::Minus1, 1, 1)?.pad_with_same(D::Minus2, 1, 1)?;
    let mut m: Option<Tensor> = None;
    for ky in 0..3 {
        for kx in 0..3 {
            let s = p.narrow(2, ky, h)?.narrow(3, kx, w)?;
            m = Some(match m {
                None => s,
                Some(prev) => prev.maximum(&s)?,
            });
        }
    }
    let m = m.expect("nine windows");
    let m = m.pad_with_same(D::Minus2, 0, h % 2)?.pad_with_same(D::Minus1, 0, w % 2)?;
    let (b, c, h2, w2) = m.dims4()?;
    m.reshape((b, c, h2 / 2, 2, w2 / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, h2 / 2, w2 / 2))
}

pub struct ResNet {
    stem: ConvBn,
    blocks: Vec<Block>,
    fc: Linear,
}

impl ResNet {
    pub fn new(depth: u32, classes: usize, vb: VarBuilder) -> Result<Self> {
        let (layers, bottleneck): ([usize; 4], bool) = match depth {
            18 => ([2, 2, 2, 2], false),
            34 => ([3, 4, 6, 3], false),
            50 => ([3, 4, 6, 3], true),
            101 => ([3, 4, 23, 3], true),
            152 => ([3, 8, 36, 3], true),
            _ => candle_core::bail!("no ResNet-{depth}"),
        };
        let expansion = if bottleneck { 4 } else { 1 };
        let stem = ConvBn::new(3, 64, 7, 2, vb.clone(), "conv1", "bn1")?;
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (li, &n) in layers.iter().enumerate() {
            let width = 64 << li;
            let lvb = vb.pp(format!("layer{}", li + 1));
            for bi in 0..n {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                blocks.push(Block::new(cin, width, stride, bottleneck, lvb.pp(bi))?);
                cin = width * expansion;
            }
        }
        let fc = linear(cin, classes, vb.pp("fc"))?;
        Ok(Self { stem, blocks, fc })
    }
}

impl Module for ResNet {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = max_pool_3x3_s2(&self.stem.forward(xs)?.relu()?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        h.mean(D::Minus1)?.mean(D::Minus1)?.apply(&self.fc)
    }
}
