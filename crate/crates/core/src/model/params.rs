use std::collections::{BTreeMap, HashMap};

use super::config::{DecoderId, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};

/// How a parameter starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, std 0.02, resampled outside ±2σ.
    Weight,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![fan_in, fan_out],
            init: Init::Weight,
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![fan_out],
            init: Init::Zeros,
        });
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![d],
            init: Init::Ones,
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![d],
            init: Init::Zeros,
        });
    }

    fn block(&mut self, prefix: &str, d: usize, mlp_ratio: usize) {
        self.norm(&format!("{prefix}.norm1"), d);
        for sub in ["attn_q", "attn_k", "attn_v", "attn_proj"] {
            self.linear(&format!("{prefix}.{sub}"), d, d);
        }
        self.norm(&format!("{prefix}.norm2"), d);
        self.linear(&format!("{prefix}.mlp_fc1"), d, d * mlp_ratio);
        self.linear(&format!("{prefix}.mlp_fc2"), d * mlp_ratio, d);
    }

    fn channel_stack(&mut self, prefix: &str, input: usize, hidden: usize, output: usize, layers: usize) {
        for l in 1..=layers {
            let fan_in = if l == 1 { input } else { hidden };
            let fan_out = if l == layers { output } else { hidden };
            self.linear(&format!("{prefix}.layer{l}"), fan_in, fan_out);
        }
        self.linear(&format!("{prefix}.skip"), input, output);
    }
}

/// Every parameter of the encoder and both decoders, in construction order.
///
/// Names follow `{enc|dec1|dec2}.{sem|chan}.…`; semantic blocks live under
/// `stage{S}.block{B}` with 1-based stages. Patch merging (encoder) and
/// patch splitting (decoder) belong to the stage they feed.
pub fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let p = config.patch_size;
    let dims = config.stage_dims;
    let c_out = config.symbols_per_token()?;
    let layers = config.channel_coder_layers;
    let mut specs = SpecList(Vec::new());

    specs.linear("enc.sem.embed.proj", p * p * 3, dims[0]);
    specs.norm("enc.sem.embed.norm", dims[0]);
    for s in 0..4 {
        if s > 0 {
            specs.norm(&format!("enc.sem.stage{}.merge.norm", s + 1), 4 * dims[s - 1]);
            specs.linear(&format!("enc.sem.stage{}.merge.proj", s + 1), 4 * dims[s - 1], dims[s]);
        }
        for b in 0..config.encoder_depths[s] {
            specs.block(&format!("enc.sem.stage{}.block{b}", s + 1), dims[s], config.mlp_ratio);
        }
    }
    specs.norm("enc.sem.head.norm", dims[3]);
    specs.channel_stack("enc.chan", dims[3], dims[3], c_out, layers);

    for which in [DecoderId::Hcd, DecoderId::Lcd] {
        let dec = which.prefix();
        let depths = config.decoder_depths(which);
        specs.channel_stack(&format!("{dec}.chan"), c_out, dims[3], dims[3], layers);
        for s in 0..4 {
            let d = config.decoder_dim(s);
            if s > 0 {
                let prev = config.decoder_dim(s - 1);
                specs.linear(&format!("{dec}.sem.stage{}.split.proj", s + 1), prev, 4 * d);
                specs.norm(&format!("{dec}.sem.stage{}.split.norm", s + 1), d);
            }
            for b in 0..depths[s] {
                specs.block(&format!("{dec}.sem.stage{}.block{b}", s + 1), d, config.mlp_ratio);
            }
        }
        specs.norm(&format!("{dec}.sem.head.norm"), dims[0]);
        specs.linear(&format!("{dec}.sem.head.unembed"), dims[0], p * p * 3);
    }
    Ok(specs.0)
}

/// Named parameter tensors, iterated in lexicographic name order.
/// A tensor's `requires_grad` flag is its trainable flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh parameters for `config`. Each tensor draws from its own stream
    /// keyed by `init_seed` and its name.
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        let mut set = Self::new();
        for spec in param_specs(config)? {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Weight => {
                    let mut stream = Stream::derive(init_seed, &format!("init/{}", spec.name));
                    (0..n).map(|_| 0.02 * truncated_normal(&mut stream)).collect()
                }
            };
            set.insert(spec.name, Tensor::new(spec.shape, data)?.with_grad());
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name, tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count of tensors whose names start with `prefix`.
    pub fn count_under(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Names matching any prefix in `selector`, each prefix required to
    /// match at least one name.
    pub fn select(&self, selector: &[&str]) -> Result<Vec<String>> {
        for prefix in selector {
            if !self.names().any(|n| n.starts_with(prefix)) {
                return Err(Error::EmptySelector(prefix.to_string()));
            }
        }
        Ok(self
            .names()
            .filter(|n| selector.iter().any(|p| n.starts_with(p)))
            .map(str::to_string)
            .collect())
    }

    pub fn set_trainable(&mut self, selector: &[&str], trainable: bool) -> Result<()> {
        for name in self.select(selector)? {
            self.tensors.get_mut(&name).expect("selected name exists").requires_grad = trainable;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Mutable tensors for an explicit, ordered name list.
    pub fn tensors_mut(&mut self, names: &[String]) -> Result<Vec<&mut Tensor>> {
        let mut wanted: HashMap<&str, usize> = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            wanted.insert(n.as_str(), i);
        }
        let mut slots: Vec<Option<&mut Tensor>> = (0..names.len()).map(|_| None).collect();
        for (name, t) in self.tensors.iter_mut() {
            if let Some(&i) = wanted.get(name.as_str()) {
                slots[i] = Some(t);
            }
        }
        slots
            .into_iter()
            .zip(names)
            .map(|(s, n)| s.ok_or_else(|| Error::UnknownParameter(n.clone())))
            .collect()
    }

    /// Ordered `(name, shape)` list, the structural fingerprint of a set.
    pub fn shape_list(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n[prefix.len()..].to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Copies of every tensor under the given prefixes, for before/after
    /// comparisons.
    pub fn snapshot(&self, prefixes: &[&str]) -> BTreeMap<String, Vec<f64>> {
        self.iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect()
    }
}

fn truncated_normal(stream: &mut Stream) -> f64 {
    loop {
        let z = stream.normal();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Suffixes (after `decK.`) moved by [`transfer_stages`]: the last two
/// semantic stages and the patch-unembed head.
pub const TRANSFER_SUFFIXES: [&str; 3] = ["sem.stage3.", "sem.stage4.", "sem.head."];

pub fn transfer_selector(which: DecoderId) -> Vec<String> {
    TRANSFER_SUFFIXES
        .iter()
        .map(|s| format!("{}.{s}", which.prefix()))
        .collect()
}

/// Overwrites the LCD's trailing stages and head with copies of the HCD's.
/// Returns the destination names written.
pub fn transfer_stages(params: &mut ParameterSet) -> Result<Vec<String>> {
    let mut copies = Vec::new();
    for suffix in TRANSFER_SUFFIXES {
        let src_prefix = format!("dec1.{suffix}");
        let dst_prefix = format!("dec2.{suffix}");
        let src = params.shape_list(&src_prefix);
        let dst = params.shape_list(&dst_prefix);
        if src.is_empty() || src != dst {
            return Err(Error::shape(
                "transfer_stages",
                format!("`{src_prefix}` and `{dst_prefix}` have different layouts"),
            ));
        }
        for (rest, _) in src {
            let values = params.get(&format!("{src_prefix}{rest}"))?.data().to_vec();
            copies.push((format!("{dst_prefix}{rest}"), values));
        }
    }
    let mut written = Vec::with_capacity(copies.len());
    for (name, values) in copies {
        params.get_mut(&name)?.data_mut().copy_from_slice(&values);
        written.push(name);
    }
    Ok(written)
}

/// Lazily registers parameters on a tape and routes gradients back.
#[derive(Debug, Default)]
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uses `var` for `name` instead of registering a new leaf.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&mut self, tape: &mut Tape, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = tape.leaf(params.get(name)?);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// After `tape.backward`, adds each bound trainable parameter's gradient
    /// into its `grad` buffer.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ParameterSet) -> Result<()> {
        for (name, &v) in &self.vars {
            if let Some(g) = tape.grad(v) {
                let t = params.get_mut(name)?;
                if t.requires_grad {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}
