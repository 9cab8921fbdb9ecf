//! The image-specific super-resolution network.
//!
//! A shared eight-layer extractor encodes the upsampled son and the cousin.
//! Non-local blocks fuse them from the 1/8 scale up to 1/2, transposed
//! convolutions move between scales, and a two-layer head predicts the
//! residual over the upsampled son.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, NonLocal, NonLocalCache, Pointwise, TransposedConv};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const EXTRACTOR_LAYERS: usize = 8;
/// Extractor layers (1-based) after which the 1/2, 1/4 and 1/8 scales are tapped.
const TAPS: [usize; 3] = [6, 7, 8];
const FINE_SKIP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    /// Each block attends over its own input; no cousin branch.
    ReferenceFree,
    /// Only the coarsest non-local block.
    SingleScale,
}

impl Mode {
    pub fn to_byte(self) -> u8 {
        match self {
            Mode::Full => 0,
            Mode::ReferenceFree => 1,
            Mode::SingleScale => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Mode> {
        [Mode::Full, Mode::ReferenceFree, Mode::SingleScale].into_iter().find(|m| m.to_byte() == b)
    }

    pub fn uses_cousin(self) -> bool {
        self != Mode::ReferenceFree
    }

    fn blocks(self) -> usize {
        if self == Mode::SingleScale {
            1
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Feature channels; the non-local embedding uses half of it.
    pub width: usize,
    /// Image channels in and out.
    pub channels: usize,
    pub mode: Mode,
    /// Add the son's extractor features after each upsampling step.
    pub son_skips: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { width: 128, channels: 3, mode: Mode::Full, son_skips: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub extractor: Vec<Conv>,
    /// Coarse to fine.
    pub blocks: Vec<NonLocal>,
    pub upsamplers: Vec<TransposedConv>,
    pub head: Conv,
    pub output: Conv,
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by the eight post-ReLU extractor outputs.
    son: Vec<Tensor>,
    cousin: Option<Vec<Tensor>>,
    levels: Vec<LevelCache>,
    head_in: Tensor,
    head_out: Tensor,
}

#[derive(Debug, Clone)]
struct LevelCache {
    query: Tensor,
    block: Option<NonLocalCache>,
    fused: Tensor,
}

fn extractor_stride(layer: usize) -> usize {
    if layer >= TAPS[0] {
        2
    } else {
        1
    }
}

fn relu_mask(grad: &mut Tensor, act: &Tensor) {
    for (g, a) in grad.data.iter_mut().zip(&act.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

impl Network {
    /// All-zero parameters with the layout implied by `config`.
    pub fn zeros(config: NetConfig) -> Result<Network> {
        let c = config.width;
        if c < 2 || c % 2 == 1 || config.channels == 0 {
            return Err(Error::Config(format!("network width {c} must be even and >= 2")));
        }
        let extractor = (1..=EXTRACTOR_LAYERS)
            .map(|l| Conv::zeros(if l == 1 { config.channels } else { c }, c, extractor_stride(l)))
            .collect();
        Ok(Network {
            config,
            extractor,
            blocks: (0..config.mode.blocks()).map(|_| NonLocal::zeros(c, c / 2)).collect(),
            upsamplers: (0..3).map(|_| TransposedConv::zeros(c, c)).collect(),
            head: Conv::zeros(c, c, 1),
            output: Conv::zeros(c, config.channels, 1),
        })
    }

    /// He-normal convolutions, `1/fan_in` embeddings and upsamplers, zero biases
    /// and a zero output layer.
    pub fn new(config: NetConfig) -> Result<Network> {
        let mut net = Network::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |w: &mut Vec<f64>, var: f64| {
            let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
            w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        };
        for conv in net.extractor.iter_mut().chain([&mut net.head]) {
            fill(&mut conv.weight, 2.0 / (conv.cin * 9) as f64);
        }
        for block in &mut net.blocks {
            for p in [&mut block.theta, &mut block.phi, &mut block.g, &mut block.h] {
                fill(&mut p.weight, 1.0 / p.cin as f64);
            }
        }
        for up in &mut net.upsamplers {
            fill(&mut up.weight, 1.0 / (up.cin * 4) as f64);
        }
        Ok(net)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Parameter buffers in declaration order.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for conv in &self.extractor {
            out.extend([&conv.weight, &conv.bias]);
        }
        for b in &self.blocks {
            for p in [&b.theta, &b.phi, &b.g, &b.h] {
                out.extend([&p.weight, &p.bias]);
            }
        }
        for up in &self.upsamplers {
            out.extend([&up.weight, &up.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias, &self.output.weight, &self.output.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for conv in &mut self.extractor {
            out.extend([&mut conv.weight, &mut conv.bias]);
        }
        for b in &mut self.blocks {
            for p in [&mut b.theta, &mut b.phi, &mut b.g, &mut b.h] {
                let Pointwise { weight, bias, .. } = p;
                out.extend([weight, bias]);
            }
        }
        for up in &mut self.upsamplers {
            out.extend([&mut up.weight, &mut up.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias, &mut self.output.weight, &mut self.output.bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = Vec::with_capacity(EXTRACTOR_LAYERS + 1);
        acts.push(x.clone());
        for conv in &self.extractor {
            let next = conv.forward(acts.last().expect("non-empty"))?.relu();
            acts.push(next);
        }
        Ok(acts)
    }

    /// Predicts the super-resolved patch. `cousin` must match the son's size
    /// and is required except in reference-free mode, where it is rejected.
    pub fn forward(&self, son_up: &Tensor, cousin: Option<&Tensor>) -> Result<(Tensor, ForwardCache)> {
        match (self.mode().uses_cousin(), cousin) {
            (true, None) => return Err(Error::Mode(format!("{:?} mode needs a cousin", self.mode()))),
            (false, Some(_)) => return Err(Error::Mode("reference-free mode takes no cousin".into())),
            _ => {}
        }
        if let Some(c) = cousin {
            if c.shape() != son_up.shape() {
                return Err(Error::Shape(format!("cousin {:?} vs son {:?}", c.shape(), son_up.shape())));
            }
        }
        let son = self.extract(son_up)?;
        let cousin = cousin.map(|c| self.extract(c)).transpose()?;

        let mut levels = Vec::with_capacity(3);
        let mut query = son[TAPS[2]].clone();
        for level in 0..3 {
            let tap = TAPS[2] - level;
            let (fused, block) = match self.blocks.get(level) {
                Some(b) => {
                    let reference = cousin.as_ref().map_or(&query, |c| &c[tap]);
                    let (out, cache) = b.forward(&query, reference)?;
                    (out, Some(cache))
                }
                None => (query.clone(), None),
            };
            let skip = &son[tap - 1];
            let mut up = self.upsamplers[level].forward(&fused, (skip.height, skip.width))?;
            if self.config.son_skips {
                up.add_assign(skip);
            }
            levels.push(LevelCache { query, block, fused });
            query = up;
        }
        debug_assert_eq!(TAPS[0] - 1, FINE_SKIP);
        let head_out = self.head.forward(&query)?.relu();
        let mut out = self.output.forward(&head_out)?;
        out.add_assign(son_up);
        Ok((out, ForwardCache { son, cousin, levels, head_in: query, head_out }))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, son_up: &Tensor, cousin: Option<&Tensor>) -> Result<Tensor> {
        self.forward(son_up, cousin).map(|(out, _)| out)
    }

    /// Parameter gradients of `<output, dout>` at the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dout: &Tensor) -> Result<Network> {
        if dout.shape() != cache.son[0].shape() {
            return Err(Error::Shape(format!("output gradient {:?} vs output {:?}", dout.shape(), cache.son[0].shape())));
        }
        let mut grad = Network::zeros(self.config)?;
        let mut dh = self.output.backward(&cache.head_out, dout, &mut grad.output, true).expect("input grad");
        relu_mask(&mut dh, &cache.head_out);
        let mut du = self.head.backward(&cache.head_in, &dh, &mut grad.head, true).expect("input grad");

        let mut dson: Vec<Option<Tensor>> = vec![None; EXTRACTOR_LAYERS + 1];
        let mut dcousin: Vec<Option<Tensor>> = vec![None; EXTRACTOR_LAYERS + 1];
        let add = |slot: &mut Option<Tensor>, t: Tensor| match slot {
            Some(s) => s.add_assign(&t),
            None => *slot = Some(t),
        };
        for level in (0..3).rev() {
            let tap = TAPS[2] - level;
            let lc = &cache.levels[level];
            if self.config.son_skips {
                add(&mut dson[tap - 1], du.clone());
            }
            let dfused = self.upsamplers[level].backward(&lc.fused, &du, &mut grad.upsamplers[level]);
            let dquery = match (self.blocks.get(level), &lc.block) {
                (Some(b), Some(bc)) => {
                    let reference = cache.cousin.as_ref().map_or(&lc.query, |c| &c[tap]);
                    let (mut dq, dr) = b.backward(&lc.query, reference, bc, &dfused, &mut grad.blocks[level]);
                    if cache.cousin.is_some() {
                        add(&mut dcousin[tap], dr);
                    } else {
                        dq.add_assign(&dr);
                    }
                    dq
                }
                _ => dfused,
            };
            if level == 0 {
                add(&mut dson[tap], dquery);
            } else {
                du = dquery;
            }
        }
        self.extractor_backward(&cache.son, dson, &mut grad);
        if let Some(acts) = &cache.cousin {
            self.extractor_backward(acts, dcousin, &mut grad);
        }
        Ok(grad)
    }

    fn extractor_backward(&self, acts: &[Tensor], mut injected: Vec<Option<Tensor>>, grad: &mut Network) {
        let mut d: Option<Tensor> = None;
        for layer in (1..=EXTRACTOR_LAYERS).rev() {
            d = match (d, injected[layer].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(mut g) = d.take() else { continue };
            relu_mask(&mut g, &acts[layer]);
            d = self.extractor[layer - 1].backward(&acts[layer - 1], &g, &mut grad.extractor[layer - 1], layer > 1);
        }
    }

    /// Little-endian checkpoint: `"RZNW" | version u16 | mode u8 | width u32 |
    /// channels u32 | skips u8 | seed u64 | blobs u32 | (len u32, f32 x len)*`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RZNW");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.push(self.mode().to_byte());
        out.extend_from_slice(&(self.config.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.channels as u32).to_le_bytes());
        out.push(self.config.son_skips as u8);
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Network, String> {
        let mut r = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if r.len() < n {
                return Err("truncated checkpoint".into());
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != b"RZNW" {
            return Err("missing RZNW magic".into());
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != 1 {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mode = Mode::from_byte(take(1)?[0]).ok_or("bad mode byte")?;
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let width = u32_at(take(4)?);
        let channels = u32_at(take(4)?);
        let son_skips = take(1)?[0] != 0;
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut net = Network::zeros(NetConfig { width, channels, mode, son_skips, seed }).map_err(|e| e.to_string())?;
        let blobs = u32_at(take(4)?);
        let mut params = net.params_mut();
        if blobs != params.len() {
            return Err(format!("expected {} parameter blobs, found {blobs}", params.len()));
        }
        for p in params.iter_mut() {
            let len = u32_at(take(4)?);
            if len != p.len() {
                return Err(format!("blob of {len} values where {} expected", p.len()));
            }
            for v in p.iter_mut() {
                *v = f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64;
            }
        }
        drop(params);
        if !r.is_empty() {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Network::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor { channels: c, height: h, width: w, data: (0..c * h * w).map(|_| rng.random::<f64>()).collect() }
    }

    fn config(mode: Mode, width: usize) -> NetConfig {
        NetConfig { width, mode, ..NetConfig::default() }
    }

    #[test]
    fn documented_parameter_counts() {
        assert_eq!(Network::zeros(config(Mode::Full, 128)).unwrap().param_count(), 2_073_795);
        assert_eq!(Network::zeros(config(Mode::ReferenceFree, 128)).unwrap().param_count(), 2_073_795);
        assert_eq!(Network::zeros(config(Mode::SingleScale, 128)).unwrap().param_count(), 2_007_619);
    }

    #[test]
    fn zero_network_returns_upsampled_son() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let son = random_tensor(&mut rng, 3, 20, 20);
        let cousin = random_tensor(&mut rng, 3, 20, 20);
        let zero = Network::zeros(config(Mode::Full, 8)).unwrap();
        assert_eq!(zero.predict(&son, Some(&cousin)).unwrap(), son);
        // zero-initialized output layer gives the same identity
        for mode in [Mode::Full, Mode::SingleScale] {
            let net = Network::new(config(mode, 8)).unwrap();
            assert_eq!(net.predict(&son, Some(&cousin)).unwrap(), son);
        }
        let free = Network::new(config(Mode::ReferenceFree, 8)).unwrap();
        assert_eq!(free.predict(&son, None).unwrap(), son);
    }

    #[test]
    fn mode_and_shape_contracts() {
        let son = Tensor::zeros(3, 16, 16);
        let free = Network::zeros(config(Mode::ReferenceFree, 4)).unwrap();
        assert!(matches!(free.forward(&son, Some(&son)), Err(Error::Mode(_))));
        let full = Network::zeros(config(Mode::Full, 4)).unwrap();
        assert!(matches!(full.forward(&son, None), Err(Error::Mode(_))));
        assert!(matches!(full.forward(&son, Some(&Tensor::zeros(3, 16, 12))), Err(Error::Shape(_))));
    }

    #[test]
    fn odd_sizes_crop_to_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Network::new(config(Mode::Full, 4)).unwrap();
        net.output.weight.iter_mut().for_each(|w| *w = 0.1);
        let son = random_tensor(&mut rng, 3, 19, 13);
        let out = net.predict(&son, Some(&son)).unwrap();
        assert_eq!(out.shape(), (3, 19, 13));
    }

    fn loss(net: &Network, son: &Tensor, cousin: Option<&Tensor>, proj: &Tensor) -> f64 {
        net.predict(son, cousin).unwrap().data.iter().zip(&proj.data).map(|(a, b)| a * b).sum()
    }

    fn gradient_check(mode: Mode) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(NetConfig { seed: 9, ..config(mode, 4) }).unwrap();
        let normal = Normal::new(0.0, 0.3).unwrap();
        // non-zero output layer and biases so every path carries gradient
        for p in net.params_mut() {
            for v in p.iter_mut() {
                if *v == 0.0 {
                    *v = normal.sample(&mut rng) * 0.1;
                }
            }
        }
        let son = random_tensor(&mut rng, 3, 16, 16);
        let cousin_t = random_tensor(&mut rng, 3, 16, 16);
        let cousin = mode.uses_cousin().then_some(&cousin_t);
        let proj = random_tensor(&mut rng, 3, 16, 16);
        let (_, cache) = net.forward(&son, cousin).unwrap();
        let grad = net.backward(&cache, &proj).unwrap();
        let analytic = grad.params();
        let delta = 1e-3;
        for (t, g) in analytic.iter().enumerate() {
            let mut fd = vec![0.0; g.len()];
            for i in 0..g.len() {
                let mut plus = net.clone();
                plus.params_mut()[t][i] += delta;
                let mut minus = net.clone();
                minus.params_mut()[t][i] -= delta;
                fd[i] = (loss(&plus, &son, cousin, &proj) - loss(&minus, &son, cousin, &proj)) / (2.0 * delta);
            }
            let diff: f64 = fd.iter().zip(g.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt() + g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff <= 1e-2 * scale.max(1e-8), "{mode:?} tensor {t}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn gradients_match_finite_differences_full() {
        gradient_check(Mode::Full);
    }

    #[test]
    fn gradients_match_finite_differences_reference_free() {
        gradient_check(Mode::ReferenceFree);
    }

    #[test]
    fn gradients_match_finite_differences_single_scale() {
        gradient_check(Mode::SingleScale);
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::new(config(Mode::Full, 4)).unwrap();
        net.output.weight.iter_mut().for_each(|w| *w = 0.05);
        let son = random_tensor(&mut rng, 3, 16, 16);
        let (_, cache) = net.forward(&son, Some(&son)).unwrap();
        let zero = net.backward(&cache, &Tensor::zeros(3, 16, 16)).unwrap();
        assert!(zero.params().iter().all(|p| p.iter().all(|&v| v == 0.0)));
        let proj = random_tensor(&mut rng, 3, 16, 16);
        let mut twice = proj.clone();
        twice.scale(2.0);
        let g1 = net.backward(&cache, &proj).unwrap();
        let g2 = net.backward(&cache, &twice).unwrap();
        for (a, b) in g1.params().iter().zip(g2.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_matches_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let son = random_tensor(&mut rng, 3, 96, 96);
        let cousin = random_tensor(&mut rng, 3, 96, 96);
        let mut net = Network::new(NetConfig { seed: 42, ..config(Mode::Full, 16) }).unwrap();
        let normal = Normal::new(0.0, 0.05).unwrap();
        net.output.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        let a = net.predict(&son, Some(&cousin)).unwrap();
        let b = net.predict(&son, Some(&cousin)).unwrap();
        assert_eq!(a, b);
        let residual: Vec<f64> = a.data.iter().zip(&son.data).map(|(x, y)| x - y).collect();
        let sum: f64 = residual.iter().sum();
        let sq: f64 = residual.iter().map(|v| v * v).sum();
        // recorded once from this configuration
        let (base_sum, base_sq) = (BASELINE_SUM, BASELINE_SQ);
        assert!((sum - base_sum).abs() < 1e-6 * (1.0 + base_sum.abs()), "sum {sum:.17e}");
        assert!((sq - base_sq).abs() < 1e-6 * base_sq, "sq {sq:.17e}");
    }

    const BASELINE_SUM: f64 = 2.728_863_785_239_331_6e4;
    const BASELINE_SQ: f64 = 6.080_077_617_845_550_4e4;

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::new(NetConfig { seed: 3, ..config(Mode::SingleScale, 4) }).unwrap();
        let back = Network::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back.config, net.config);
        for (a, b) in back.params().iter().zip(net.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut bytes = net.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Network::from_bytes(&bytes).is_err());
    }
}
