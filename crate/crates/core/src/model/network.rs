//! Forward passes of the encoder and the two decoders.
//!
//! Images travel as `[B, H, W, 3]`; inside the networks tokens are rows of a
//! `[B·gh·gw, d]` matrix in per-image row-major grid order, so every
//! token-wise layer is one matmul over the whole batch and spatial
//! rearrangements (patching, windowing, merging, splitting) are row gathers.
//!
//! Pixels are centered on mid-gray: the encoder sees `I − 0.5` and the
//! decoders add 0.5 back, so an untrained decoder already outputs gray.

use std::sync::Arc;

use super::config::{DecoderId, ModelConfig, LN_EPS};
use super::params::{Binding, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{window_merge_index, window_partition_index, Mask, Tape, Tensor, Var};

/// Offset removed from pixels before encoding and restored after decoding.
pub const PIXEL_CENTER: f64 = 0.5;

fn shift_pixels(tape: &mut Tape, x: Var, offset: f64) -> Result<Var> {
    let bias = tape.constant(Tensor::full(vec![3], offset));
    tape.add_bias(x, bias)
}

/// The encoder/decoder pair bound to one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a ParameterSet,
    binding: &'a mut Binding,
}

impl Ctx<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.binding.var(self.tape, self.params, name)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Shape of one token grid inside a batch.
#[derive(Debug, Clone, Copy)]
struct Grid {
    batch: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn tokens(self) -> usize {
        self.batch * self.h * self.w
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn image_dims(&self, tape: &Tape, images: Var) -> Result<(usize, usize, usize)> {
        match *tape.shape(images) {
            [b, h, w, 3] => {
                self.config.validate_image(h, w)?;
                Ok((b, h, w))
            }
            ref s => Err(Error::shape("encode", format!("expected [B, H, W, 3], got {s:?}"))),
        }
    }

    /// Semantic then channel encoder: `[B, H, W, 3] → [B, n_sym]`.
    pub fn encode(&self, tape: &mut Tape, params: &ParameterSet, binding: &mut Binding, images: Var) -> Result<Var> {
        let (batch, h, w) = self.image_dims(tape, images)?;
        let cfg = &self.config;
        let p = cfg.patch_size;
        let mut cx = Ctx { tape, params, binding };

        let mut grid = Grid {
            batch,
            h: h / p,
            w: w / p,
        };
        let centered = shift_pixels(cx.tape, images, -PIXEL_CENTER)?;
        let patches = cx.tape.gather_rows(
            centered,
            Arc::new(patch_index(batch, h, w, p)),
            vec![grid.tokens(), p * p * 3],
        )?;
        let mut x = cx.linear(patches, "enc.sem.embed.proj")?;
        x = cx.norm(x, "enc.sem.embed.norm")?;

        for s in 0..4 {
            let d = cfg.stage_dims[s];
            if s > 0 {
                let prev = cfg.stage_dims[s - 1];
                let index = merge_index(grid);
                grid = Grid {
                    batch,
                    h: grid.h / 2,
                    w: grid.w / 2,
                };
                x = cx.tape.gather_rows(x, Arc::new(index), vec![grid.tokens(), 4 * prev])?;
                x = cx.norm(x, &format!("enc.sem.stage{}.merge.norm", s + 1))?;
                x = cx.linear(x, &format!("enc.sem.stage{}.merge.proj", s + 1))?;
            }
            for b in 0..cfg.encoder_depths[s] {
                x = self.block(
                    &mut cx,
                    x,
                    grid,
                    &format!("enc.sem.stage{}.block{b}", s + 1),
                    cfg.heads[s],
                    b,
                )?;
            }
            debug_assert_eq!(cx.tape.shape(x), &[grid.tokens(), d]);
        }
        x = cx.norm(x, "enc.sem.head.norm")?;
        let symbols = self.channel_stack(&mut cx, x, "enc.chan")?;
        let per_image = grid.h * grid.w * cfg.symbols_per_token()?;
        cx.tape.reshape(symbols, vec![batch, per_image])
    }

    /// Channel then semantic decoder of `which`: `[B, n_sym] → [B, H, W, 3]`.
    /// The output is not clamped.
    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        binding: &mut Binding,
        received: Var,
        which: DecoderId,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n_sym = cfg.n_symbols(h, w)?;
        let batch = match *tape.shape(received) {
            [b, n] if n == n_sym => b,
            ref s => return Err(Error::shape("decode", format!("expected [B, {n_sym}], got {s:?}"))),
        };
        let dec = which.prefix();
        let depths = cfg.decoder_depths(which);
        let c_out = cfg.symbols_per_token()?;
        let p = cfg.patch_size;
        let mut cx = Ctx { tape, params, binding };

        let (gh, gw) = cfg.grid(h, w, 3);
        let mut grid = Grid { batch, h: gh, w: gw };
        let tokens = cx.tape.reshape(received, vec![grid.tokens(), c_out])?;
        let mut x = self.channel_stack(&mut cx, tokens, &format!("{dec}.chan"))?;

        for s in 0..4 {
            let d = cfg.decoder_dim(s);
            if s > 0 {
                x = cx.linear(x, &format!("{dec}.sem.stage{}.split.proj", s + 1))?;
                x = cx.tape.reshape(x, vec![grid.tokens() * 4, d])?;
                let index = split_index(grid);
                grid = Grid {
                    batch,
                    h: grid.h * 2,
                    w: grid.w * 2,
                };
                x = cx.tape.gather_rows(x, Arc::new(index), vec![grid.tokens(), d])?;
                x = cx.norm(x, &format!("{dec}.sem.stage{}.split.norm", s + 1))?;
            }
            for b in 0..depths[s] {
                x = self.block(
                    &mut cx,
                    x,
                    grid,
                    &format!("{dec}.sem.stage{}.block{b}", s + 1),
                    cfg.decoder_heads(s),
                    b,
                )?;
            }
        }
        x = cx.norm(x, &format!("{dec}.sem.head.norm"))?;
        x = cx.linear(x, &format!("{dec}.sem.head.unembed"))?;
        x = cx.tape.reshape(x, vec![grid.tokens() * p * p, 3])?;
        let out = cx
            .tape
            .gather_rows(x, Arc::new(unpatch_index(batch, h, w, p)), vec![batch, h, w, 3])?;
        shift_pixels(cx.tape, out, PIXEL_CENTER)
    }

    /// Seven token-wise layers with GELU between them, plus a linear skip
    /// from input to output.
    fn channel_stack(&self, cx: &mut Ctx<'_>, x: Var, prefix: &str) -> Result<Var> {
        let layers = self.config.channel_coder_layers;
        let mut hdn = x;
        for l in 1..=layers {
            hdn = cx.linear(hdn, &format!("{prefix}.layer{l}"))?;
            if l < layers {
                hdn = cx.tape.gelu(hdn)?;
            }
        }
        let skip = cx.linear(x, &format!("{prefix}.skip"))?;
        cx.tape.add(hdn, skip)
    }

    /// Pre-norm transformer block with windowed self-attention. Odd blocks
    /// use cyclically shifted windows when enabled and the grid is larger
    /// than one window.
    fn block(&self, cx: &mut Ctx<'_>, x: Var, grid: Grid, prefix: &str, heads: usize, index: usize) -> Result<Var> {
        let win = self.config.window;
        let shift = if self.config.shifted_windows && index % 2 == 1 && grid.h > win && grid.w > win {
            win / 2
        } else {
            0
        };
        let n = grid.tokens();
        let d = *cx.tape.shape(x).last().expect("token rows");
        let part = Arc::new(window_partition_index(grid.batch, grid.h, grid.w, win, shift)?);
        let merge = Arc::new(window_merge_index(grid.batch, grid.h, grid.w, win, shift)?);
        let mask = (shift > 0).then(|| shifted_window_mask(grid.h, grid.w, win, shift));

        let y = cx.norm(x, &format!("{prefix}.norm1"))?;
        let y = cx.tape.gather_rows(y, part, vec![n, d])?;
        let q = cx.linear(y, &format!("{prefix}.attn_q"))?;
        let k = cx.linear(y, &format!("{prefix}.attn_k"))?;
        let v = cx.linear(y, &format!("{prefix}.attn_v"))?;
        let a = cx.tape.window_attention(q, k, v, heads, win * win, mask)?;
        let a = cx.linear(a, &format!("{prefix}.attn_proj"))?;
        let a = cx.tape.gather_rows(a, merge, vec![n, d])?;
        let x = cx.tape.add(x, a)?;

        let y = cx.norm(x, &format!("{prefix}.norm2"))?;
        let y = cx.linear(y, &format!("{prefix}.mlp_fc1"))?;
        let y = cx.tape.gelu(y)?;
        let y = cx.linear(y, &format!("{prefix}.mlp_fc2"))?;
        cx.tape.add(x, y)
    }

    /// Encodes one `[h, w, 3]` image to its `n_sym` channel symbols.
    pub fn encode_image(&self, params: &ParameterSet, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape().to_vec();
        let batched = image.clone().reshaped([&[1], &shape[..]].concat())?;
        let mut tape = Tape::no_grad();
        let mut binding = Binding::new();
        let x = tape.constant(batched);
        let out = self.encode(&mut tape, params, &mut binding, x)?;
        let n = tape.value(out).len();
        tape.tensor(out).reshaped(vec![n])
    }

    /// Decodes `n_sym` received symbols to an unclamped `[h, w, 3]` image.
    pub fn decode_symbols(
        &self,
        params: &ParameterSet,
        received: &Tensor,
        which: DecoderId,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let batched = received.clone().reshaped(vec![1, received.len()])?;
        let mut tape = Tape::no_grad();
        let mut binding = Binding::new();
        let y = tape.constant(batched);
        let out = self.decode(&mut tape, params, &mut binding, y, which, h, w)?;
        tape.tensor(out).reshaped(vec![h, w, 3])
    }

    /// Multiply-accumulate count of one decoder forward pass on one image.
    pub fn decoder_flops(&self, params: &ParameterSet, which: DecoderId, h: usize, w: usize) -> Result<u64> {
        let mut tape = Tape::no_grad();
        let mut binding = Binding::new();
        let y = tape.constant(Tensor::full(vec![1, self.config.n_symbols(h, w)?], 1.0));
        self.decode(&mut tape, params, &mut binding, y, which, h, w)?;
        Ok(tape.flops())
    }
}

/// Pixel rows of `[B, H, W, 3]` grouped into `p×p` patches, patch-major,
/// pixels row-major within a patch.
fn patch_index(batch: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for pr in 0..h / p {
            for pc in 0..w / p {
                for i in 0..p {
                    for j in 0..p {
                        index.push((b * h + pr * p + i) * w + pc * p + j);
                    }
                }
            }
        }
    }
    index
}

/// Inverse of [`patch_index`].
fn unpatch_index(batch: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let forward = patch_index(batch, h, w, p);
    let mut inverse = vec![0; forward.len()];
    for (pos, &src) in forward.iter().enumerate() {
        inverse[src] = pos;
    }
    inverse
}

/// For every output token of a 2× patch merge, its four source tokens in
/// the order (0,0), (1,0), (0,1), (1,1).
fn merge_index(grid: Grid) -> Vec<usize> {
    let (oh, ow) = (grid.h / 2, grid.w / 2);
    let mut index = Vec::with_capacity(grid.tokens());
    for b in 0..grid.batch {
        for r in 0..oh {
            for c in 0..ow {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    index.push(b * grid.h * grid.w + (2 * r + dr) * grid.w + 2 * c + dc);
                }
            }
        }
    }
    index
}

/// Places the four sub-tokens produced from each token of `grid` onto the
/// doubled grid, mirroring [`merge_index`].
fn split_index(grid: Grid) -> Vec<usize> {
    let (nh, nw) = (grid.h * 2, grid.w * 2);
    let mut index = Vec::with_capacity(grid.tokens() * 4);
    for b in 0..grid.batch {
        for r in 0..nh {
            for c in 0..nw {
                let token = b * grid.h * grid.w + (r / 2) * grid.w + c / 2;
                let sub = (r % 2) + 2 * (c % 2);
                index.push(token * 4 + sub);
            }
        }
    }
    index
}

/// Attention mask for shifted windows: after the cyclic shift, tokens may
/// only attend within the same original region.
fn shifted_window_mask(h: usize, w: usize, win: usize, shift: usize) -> Mask {
    let region = |pos: usize, extent: usize| {
        if pos < extent - win {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    let t = win * win;
    let mut mask = Vec::with_capacity((h / win) * (w / win) * t * t);
    for wr in 0..h / win {
        for wc in 0..w / win {
            let labels: Vec<usize> = (0..t)
                .map(|k| region(wr * win + k / win, h) * 3 + region(wc * win + k % win, w))
                .collect();
            for i in 0..t {
                for j in 0..t {
                    mask.push(labels[i] == labels[j]);
                }
            }
        }
    }
    Arc::new(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_and_unpatch_are_inverse() {
        let f = patch_index(2, 8, 4, 2);
        let g = unpatch_index(2, 8, 4, 2);
        for (i, &src) in f.iter().enumerate() {
            assert_eq!(g[src], i);
        }
    }

    #[test]
    fn merge_then_split_restores_order() {
        let grid = Grid { batch: 2, h: 4, w: 6 };
        let m = merge_index(grid);
        let s = split_index(Grid { batch: 2, h: 2, w: 3 });
        // split(merge(x)) picks back the original token at each position
        for (pos, &k) in s.iter().enumerate() {
            assert_eq!(m[k], pos);
        }
    }

    #[test]
    fn shifted_mask_blocks_cross_region() {
        let mask = shifted_window_mask(4, 4, 2, 1);
        // last window (1,1) spans rows 2..4, cols 2..4 of the rolled grid:
        // rows 2 and 3 belong to different regions.
        let base = 3 * 16;
        assert!(mask[base]);
        assert!(!mask[base + 2]);
        // the first window lies entirely in region 0
        assert!(mask[..16].iter().all(|&a| a));
    }
}
