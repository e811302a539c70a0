use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{ByteTokenizer, Vocab};
use crate::error::{Error, Result};
use crate::monarch::MonarchMatrix;
use crate::numeric::{DiffArray, Graph, ParamId, ParamStore, Var};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_short_width() -> usize {
    3
}

fn default_mask_prob() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_short_width")]
    pub short_conv_width: usize,
    pub monarch_b: usize,
    #[serde(default = "default_mask_prob")]
    pub mlm_mask_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// Desk configuration: byte vocabulary, d = 64, two layers, S = 2048.
    fn default() -> Self {
        Self {
            vocab_size: super::BYTE_VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            max_seq_len: 2048,
            short_conv_width: 3,
            monarch_b: 8,
            mlm_mask_prob: 0.3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        Vocab::new(self.vocab_size)?;
        if self.max_seq_len < 16 || !self.max_seq_len.is_power_of_two() {
            return fail(format!("max_seq_len {} must be a power of two >= 16", self.max_seq_len));
        }
        if self.monarch_b == 0 || !self.monarch_b.is_power_of_two() {
            return fail(format!("monarch_b {} must be a power of two", self.monarch_b));
        }
        if self.monarch_b * self.monarch_b != self.d_model {
            return fail(format!(
                "d_model {} must equal monarch_b² = {}",
                self.d_model,
                self.monarch_b * self.monarch_b
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.short_conv_width == 0 || self.short_conv_width.is_multiple_of(2) {
            return fail(format!("short_conv_width {} must be odd", self.short_conv_width));
        }
        if !(self.mlm_mask_prob > 0.0 && self.mlm_mask_prob < 1.0) {
            return fail(format!("mlm_mask_prob {} must lie in (0, 1)", self.mlm_mask_prob));
        }
        Ok(())
    }

    /// Trainable scalars in one encoder layer.
    pub fn params_per_layer(&self) -> usize {
        let (d, s, b) = (self.d_model, self.max_seq_len, self.monarch_b);
        3 * d * d + d * s + d * self.short_conv_width + 4 * b * b * b + 4 * d
    }

    /// Exact trainable-scalar count of a model built from this config.
    pub fn count_params(&self) -> usize {
        let (v, d, s) = (self.vocab_size, self.d_model, self.max_seq_len);
        v * d + s * d + self.n_layers * self.params_per_layer() + d * v + v
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    w_u: ParamId,
    w_g: ParamId,
    kernel: ParamId,
    short: ParamId,
    w_o: ParamId,
    ln1: (ParamId, ParamId),
    m1: (ParamId, ParamId),
    m2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct ModelIds {
    token: ParamId,
    position: ParamId,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

pub(crate) const TOKEN_EMBEDDING: &str = "embeddings.token";
pub(crate) const POSITION_EMBEDDING: &str = "embeddings.position";

fn layer_name(i: usize, part: &str) -> String {
    format!("layers.{i}.{part}")
}

impl ModelIds {
    fn resolve(store: &ParamStore, n_layers: usize) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let layers = (0..n_layers)
            .map(|i| {
                let p = |part: &str| get(&layer_name(i, part));
                Ok(LayerIds {
                    w_u: p("w_u")?,
                    w_g: p("w_g")?,
                    kernel: p("kernel")?,
                    short: p("short")?,
                    w_o: p("w_o")?,
                    ln1: (p("ln1.gamma")?, p("ln1.beta")?),
                    m1: (p("m1.left")?, p("m1.right")?),
                    m2: (p("m2.left")?, p("m2.right")?),
                    ln2: (p("ln2.gamma")?, p("ln2.beta")?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            token: get(TOKEN_EMBEDDING)?,
            position: get(POSITION_EMBEDDING)?,
            layers,
            head_w: get("mlm.weight")?,
            head_b: get("mlm.bias")?,
        })
    }
}

/// Gated long-convolution encoder with Monarch dimension mixers.
///
/// Per layer, with pad rows of `X` zeroed first:
/// `U = X·W_u`, `G = σ(X·W_g)`, `C = conv_S(U, K) + short(U)`,
/// `X ← LN(X + (G ⊙ C)·W_o)`, then `X ← LN(X + M2·gelu(M1·x))` row-wise.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    vocab: Vocab,
    params: ParamStore,
    ids: ModelIds,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Signed lag stored at index `j` of a circular kernel of length `len`.
fn signed_lag(j: usize, len: usize) -> isize {
    if j <= len / 2 {
        j as isize
    } else {
        j as isize - len as isize
    }
}

fn lag_index(lag: isize, len: usize) -> usize {
    lag.rem_euclid(len as isize) as usize
}

impl EncoderModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::streams::MODEL_INIT);
        let (v, d, s, b) = (config.vocab_size, config.d_model, config.max_seq_len, config.monarch_b);
        let w = config.short_conv_width;
        let mut store = ParamStore::new();
        let arr = |shape: &[usize], vals: Vec<f64>| DiffArray::new(shape, vals).expect("init shapes");

        store.insert(TOKEN_EMBEDDING, arr(&[v, d], uniform(&mut rng, v * d, 1.0)));
        store.insert(POSITION_EMBEDDING, arr(&[s, d], uniform(&mut rng, s * d, 0.1)));
        let dense_scale = (3.0 / d as f64).sqrt();
        let monarch_scale = (3.0 / b as f64).sqrt();
        for i in 0..config.n_layers {
            let name = |p: &str| layer_name(i, p);
            store.insert(name("w_u"), arr(&[d, d], uniform(&mut rng, d * d, dense_scale)));
            store.insert(name("w_g"), arr(&[d, d], uniform(&mut rng, d * d, dense_scale)));
            store.insert(name("kernel"), arr(&[d, s], Self::init_kernel(&mut rng, d, s)));
            store.insert(name("short"), arr(&[d, w], uniform(&mut rng, d * w, (1.0 / w as f64).sqrt())));
            store.insert(name("w_o"), arr(&[d, d], uniform(&mut rng, d * d, dense_scale)));
            store.insert(name("ln1.gamma"), arr(&[d], vec![1.0; d]));
            store.insert(name("ln1.beta"), arr(&[d], vec![0.0; d]));
            for m in ["m1", "m2"] {
                let (left, right) = MonarchMatrix::init(b, monarch_scale, &mut rng)?.into_parts();
                store.insert(name(&format!("{m}.left")), left);
                store.insert(name(&format!("{m}.right")), right);
            }
            store.insert(name("ln2.gamma"), arr(&[d], vec![1.0; d]));
            store.insert(name("ln2.beta"), arr(&[d], vec![0.0; d]));
        }
        store.insert("mlm.weight", arr(&[d, v], uniform(&mut rng, d * v, (3.0 / d as f64).sqrt())));
        store.insert("mlm.bias", arr(&[v], vec![0.0; v]));
        Self::from_params(config, store)
    }

    /// Exponentially decaying random kernels with per-channel decay rates
    /// log-uniform in `[4/S, 1/2]`, scaled to unit energy.
    fn init_kernel<R: Rng + ?Sized>(rng: &mut R, d: usize, s: usize) -> Vec<f64> {
        let mut k = vec![0.0; d * s];
        let (lo, hi) = ((4.0 / s as f64).ln(), 0.5f64.ln());
        for c in 0..d {
            let rate = rng.random_range(lo..=hi).exp();
            let row = &mut k[c * s..(c + 1) * s];
            for (j, v) in row.iter_mut().enumerate() {
                let lag = signed_lag(j, s).unsigned_abs() as f64;
                *v = rng.random_range(-1.0..=1.0) * (-rate * lag).exp();
            }
            let e = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if e > 0.0 {
                row.iter_mut().for_each(|v| *v /= e);
            }
        }
        k
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = ModelIds::resolve(&params, config.n_layers)?;
        let expected = Self::expected_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config requires {shape:?}",
                    params.get(id).shape()
                )));
            }
        }
        Ok(Self {
            vocab: Vocab::new(config.vocab_size)?,
            config,
            params,
            ids,
        })
    }

    pub(crate) fn expected_shapes(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, s, b, w) = (c.vocab_size, c.d_model, c.max_seq_len, c.monarch_b, c.short_conv_width);
        let mut out = vec![
            (TOKEN_EMBEDDING.to_string(), vec![v, d]),
            (POSITION_EMBEDDING.to_string(), vec![s, d]),
        ];
        for i in 0..c.n_layers {
            for (part, shape) in [
                ("w_u", vec![d, d]),
                ("w_g", vec![d, d]),
                ("kernel", vec![d, s]),
                ("short", vec![d, w]),
                ("w_o", vec![d, d]),
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("m1.left", vec![b, b, b]),
                ("m1.right", vec![b, b, b]),
                ("m2.left", vec![b, b, b]),
                ("m2.right", vec![b, b, b]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
            ] {
                out.push((layer_name(i, part), shape));
            }
        }
        out.push(("mlm.weight".into(), vec![d, v]));
        out.push(("mlm.bias".into(), vec![v]));
        out
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn position_table(&self) -> &DiffArray {
        self.params.get(self.ids.position)
    }

    fn bind(&self, g: &mut Graph, id: ParamId, train: bool) -> Var {
        if train {
            self.params.bind(g, id)
        } else {
            g.frozen(self.params.get(id))
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Smallest working length that reproduces the length-S computation for
    /// `n` real tokens: a power of two `L ≥ 2n`, capped at S. Every lag
    /// between real positions is below `L/2`, so folding the kernel onto `L`
    /// keeps all real-to-real contributions.
    pub fn working_len(&self, n: usize) -> usize {
        (2 * n.max(1)).next_power_of_two().min(self.config.max_seq_len)
    }

    /// Kernel restricted to a working length `l` (identity when `l == S`).
    fn folded_kernel(&self, g: &mut Graph, kernel: Var, l: usize) -> Result<Var> {
        let (d, s) = (self.config.d_model, self.config.max_seq_len);
        if l == s {
            return Ok(kernel);
        }
        let mut index = Vec::with_capacity(d * l);
        for c in 0..d {
            for j in 0..l {
                index.push(c * s + lag_index(signed_lag(j, l), s));
            }
        }
        g.gather(kernel, index, &[d, l])
    }

    /// Runs the encoder on `ids` (length `L`, a power of two ≤ S) where
    /// `valid[i]` marks real tokens. Returns the L×d final states.
    pub fn forward(&self, g: &mut Graph, ids: &[u32], valid: &[bool], train: bool) -> Result<Var> {
        let l = ids.len();
        if valid.len() != l {
            return Err(Error::dim(format!("{} mask entries for {l} tokens", valid.len())));
        }
        if !l.is_power_of_two() || l < 2 {
            return Err(Error::dim(format!("working length {l} must be a power of two >= 2")));
        }
        self.check_ids(ids)?;
        let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..l).collect();

        let tok = self.bind(g, self.ids.token, train);
        let pos = self.bind(g, self.ids.position, train);
        let te = g.gather_rows(tok, &rows)?;
        let pe = g.gather_rows(pos, &positions)?;
        let mut x = g.add(te, pe)?;

        for layer in &self.ids.layers {
            let p = |g: &mut Graph, id| self.bind(g, id, train);
            x = g.mask_rows(x, &mask)?;
            let w_u = p(g, layer.w_u);
            let w_g = p(g, layer.w_g);
            let w_o = p(g, layer.w_o);
            let kernel = p(g, layer.kernel);
            let short = p(g, layer.short);

            let u = g.matmul(x, w_u)?;
            let gate_pre = g.matmul(x, w_g)?;
            let gate = g.sigmoid(gate_pre);
            let k = self.folded_kernel(g, kernel, l)?;
            let long = g.channel_conv(u, k)?;
            let local = g.short_conv(u, short)?;
            let c = g.add(long, local)?;
            let gated = g.mul(gate, c)?;
            let y = g.matmul(gated, w_o)?;
            let res = g.add(x, y)?;
            let (g1, b1) = (p(g, layer.ln1.0), p(g, layer.ln1.1));
            x = g.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

            let (m1l, m1r) = (p(g, layer.m1.0), p(g, layer.m1.1));
            let (m2l, m2r) = (p(g, layer.m2.0), p(g, layer.m2.1));
            let h = g.monarch_rows(x, m1l, m1r)?;
            let h = g.gelu(h);
            let h = g.monarch_rows(h, m2l, m2r)?;
            let res = g.add(x, h)?;
            let (g2, b2) = (p(g, layer.ln2.0), p(g, layer.ln2.1));
            x = g.layer_norm(res, g2, b2, LAYER_NORM_EPS)?;
        }
        Ok(x)
    }

    /// Full-length encode: `token_ids` (≤ S) are right-padded to S; positions
    /// with `pad_mask[i] == true` are treated as padding whatever their id.
    pub fn encode(&self, token_ids: &[u32], pad_mask: &[bool]) -> Result<DiffArray> {
        if token_ids.len() != pad_mask.len() {
            return Err(Error::dim("token ids and pad mask differ in length"));
        }
        self.check_ids(token_ids)?;
        let s = self.config.max_seq_len;
        let mut ids = token_ids.to_vec();
        ids.resize(s, self.vocab.pad());
        let mut valid: Vec<bool> = pad_mask.iter().map(|&p| !p).collect();
        valid.resize(s, false);
        let mut g = Graph::new();
        let x = self.forward(&mut g, &ids, &valid, false)?;
        Ok(g.to_array(x))
    }

    /// Right-pads `tokens` (truncated to S) to the working length.
    fn padded(&self, tokens: &[u32]) -> Result<(Vec<u32>, Vec<f64>)> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("no tokens to embed".into()));
        }
        let n = tokens.len().min(self.config.max_seq_len);
        let l = self.working_len(n);
        let mut ids = tokens[..n].to_vec();
        ids.resize(l, self.vocab.pad());
        let mut weights = vec![1.0; n];
        weights.resize(l, 0.0);
        Ok((ids, weights))
    }

    /// Mean of the final states over real positions (not normalised).
    pub fn pooled_var(&self, g: &mut Graph, tokens: &[u32], train: bool) -> Result<Var> {
        let (ids, weights) = self.padded(tokens)?;
        let valid: Vec<bool> = weights.iter().map(|&w| w > 0.0).collect();
        let x = self.forward(g, &ids, &valid, train)?;
        g.masked_mean_rows(x, &weights)
    }

    /// Unit-norm embedding of the first S tokens.
    pub fn embed_var(&self, g: &mut Graph, tokens: &[u32], train: bool) -> Result<Var> {
        let pooled = self.pooled_var(g, tokens, train)?;
        g.normalize(pooled)
    }

    pub fn mean_pooled(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.pooled_var(&mut g, tokens, false)?;
        Ok(g.value(v).to_vec())
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.embed_var(&mut g, tokens, false)?;
        Ok(g.value(v).to_vec())
    }

    /// Tokenise, truncate to S, encode, mean-pool, L2-normalise.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = ByteTokenizer::encode(text);
        if tokens.is_empty() {
            return Err(Error::EmptyInput("text has no tokens".into()));
        }
        self.embed_tokens(&tokens)
    }

    /// Per-position vocabulary logits for an L×d state matrix.
    pub fn mlm_logits(&self, g: &mut Graph, states: Var, train: bool) -> Result<Var> {
        let w = self.bind(g, self.ids.head_w, train);
        let b = self.bind(g, self.ids.head_b, train);
        let z = g.matmul(states, w)?;
        g.add_row_bias(z, b)
    }

    /// Copy of this model with maximum length `new_s`: the positional table
    /// is tiled with period S and each long kernel keeps its signed lags
    /// `(−S/2, S/2]`, zero elsewhere. All other weights are copied.
    #[must_use = "returns the extended model"]
    pub fn extend_max_seq_len(&self, new_s: usize) -> Result<Self> {
        let s = self.config.max_seq_len;
        let table = extend_positions(self.position_table(), new_s)?;
        let mut config = self.config.clone();
        config.max_seq_len = new_s;
        config.validate()?;
        let d = self.config.d_model;
        let mut store = ParamStore::new();
        for (name, arr) in self.params.iter() {
            let new = if name == POSITION_EMBEDDING {
                table.clone()
            } else if name.ends_with(".kernel") {
                let old = arr.values();
                let mut k = vec![0.0; d * new_s];
                for c in 0..d {
                    for j in 0..s {
                        let lag = signed_lag(j, s);
                        k[c * new_s + lag_index(lag, new_s)] = old[c * s + j];
                    }
                }
                DiffArray::new(&[d, new_s], k)?
            } else {
                DiffArray::new(arr.shape(), arr.values().to_vec())?
            };
            store.insert(name, new);
        }
        Self::from_params(config, store)
    }
}

/// Tiles a positional table to `new_s` rows: row `i` ← row `i mod S`.
pub fn extend_positions(table: &DiffArray, new_s: usize) -> Result<DiffArray> {
    let (s, d) = (table.rows(), table.cols());
    if new_s == 0 || !new_s.is_multiple_of(s) {
        return Err(Error::Extension(format!(
            "new length {new_s} is not a multiple of {s}"
        )));
    }
    let vals = table.values();
    let mut out = Vec::with_capacity(new_s * d);
    for i in 0..new_s {
        let r = i % s;
        out.extend_from_slice(&vals[r * d..(r + 1) * d]);
    }
    DiffArray::new(&[new_s, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check_sampled;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(v: usize, d: usize, b: usize, s: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: v,
            d_model: d,
            n_layers: layers,
            max_seq_len: s,
            short_conv_width: 3,
            monarch_b: b,
            mlm_mask_prob: 0.3,
            seed: 11,
        }
    }

    fn pooled_from_full(m: &EncoderModel, tokens: &[u32]) -> Vec<f64> {
        let states = m.encode(tokens, &vec![false; tokens.len()]).unwrap();
        let d = m.config().d_model;
        let mut mean = vec![0.0; d];
        for i in 0..tokens.len() {
            for c in 0..d {
                mean[c] += states.values()[i * d + c] / tokens.len() as f64;
            }
        }
        mean
    }

    #[test]
    fn desk_config_param_count() {
        let c = EncoderConfig::default();
        assert_eq!(c.count_params(), 456_324);
        let m = EncoderModel::new(c).unwrap();
        assert_eq!(m.count_params(), 456_324);
    }

    #[test]
    fn doubling_layers_adds_per_layer_count() {
        let a = cfg(32, 16, 4, 16, 2);
        let b = cfg(32, 16, 4, 16, 4);
        assert_eq!(b.count_params() - a.count_params(), 2 * a.params_per_layer());
        assert_eq!(EncoderModel::new(b.clone()).unwrap().count_params(), b.count_params());
    }

    #[test]
    fn token_embedding_count() {
        let m = EncoderModel::new(cfg(256 + 4, 16, 4, 16, 1)).unwrap();
        let id = m.params().id(TOKEN_EMBEDDING).unwrap();
        assert_eq!(m.params().get(id).len(), 260 * 16);
        assert_eq!(256 * 16, 4096);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(32, 16, 4, 24, 1).validate().is_err());
        assert!(cfg(32, 15, 4, 16, 1).validate().is_err());
        assert!(cfg(32, 16, 4, 8, 1).validate().is_err());
        assert!(cfg(32, 16, 4, 16, 0).validate().is_err());
        assert!(cfg(32, 16, 4, 16, 1).validate().is_ok());
    }

    #[test]
    fn compact_path_matches_full_length() {
        let m = EncoderModel::new(cfg(32, 16, 4, 64, 2)).unwrap();
        for n in [1usize, 5, 16, 33, 64] {
            let tokens: Vec<u32> = (0..n).map(|i| (i * 7 % 28) as u32).collect();
            let full = pooled_from_full(&m, &tokens);
            let compact = m.mean_pooled(&tokens).unwrap();
            for (a, b) in full.iter().zip(&compact) {
                assert!((a - b).abs() < 1e-10, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pad_ids_do_not_matter() {
        let m = EncoderModel::new(cfg(32, 16, 4, 32, 2)).unwrap();
        let tokens: Vec<u32> = vec![3, 9, 1, 4, 27];
        let mut a = tokens.clone();
        a.resize(32, 0);
        let mut b = tokens.clone();
        b.extend((0..27).map(|i| (i % 31) as u32));
        let mask: Vec<bool> = (0..32).map(|i| i >= 5).collect();
        let (sa, sb) = (m.encode(&a, &mask).unwrap(), m.encode(&b, &mask).unwrap());
        for i in 0..5 * 16 {
            assert!((sa.values()[i] - sb.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_errors() {
        let m = EncoderModel::new(cfg(32, 16, 4, 16, 1)).unwrap();
        assert!(matches!(m.encode(&[40], &[false]), Err(Error::Vocabulary { id: 40, .. })));
        assert!(matches!(m.encode(&[1; 17], &[false; 17]), Err(Error::Length { len: 17, max: 16 })));
        assert!(matches!(m.embed_text(""), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn embed_text_is_unit_and_deterministic() {
        let m = EncoderModel::new(cfg(260, 16, 4, 64, 1)).unwrap();
        let e = m.embed_text("the quick brown fox").unwrap();
        let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let again = EncoderModel::new(cfg(260, 16, 4, 64, 1)).unwrap();
        assert_eq!(again.embed_text("the quick brown fox").unwrap(), e);
        // longer than S: truncated, still fine
        assert!(m.embed_text(&"x".repeat(500)).is_ok());
    }

    #[test]
    fn random_inputs_have_sane_norms() {
        let m = EncoderModel::new(cfg(260, 16, 4, 128, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..=128);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..256)).collect();
            let states = m.encode(&ids, &vec![false; n]).unwrap();
            assert!(states.is_finite());
            for i in 0..n {
                let r = crate::numeric::DiffArray::vector(states.row(i).to_vec());
                let norm = r.values().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((0.1..=100.0).contains(&norm), "norm {norm}");
            }
        }
    }

    #[test]
    fn zero_states_give_zero_logits() {
        let m = EncoderModel::new(cfg(32, 16, 4, 16, 1)).unwrap();
        let mut g = Graph::new();
        let z = g.constant(&DiffArray::zeros(&[16, 16]));
        let logits = m.mlm_logits(&mut g, z, false).unwrap();
        assert_eq!(g.shape(logits), &[16, 32]);
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiling_example() {
        let t = DiffArray::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let e = extend_positions(&t, 8).unwrap();
        assert_eq!(e.values(), &[0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(extend_positions(&t, 4).unwrap(), t);
        assert!(matches!(extend_positions(&t, 6), Err(Error::Extension(_))));
    }

    #[test]
    fn extended_model_agrees_on_short_inputs() {
        let m = EncoderModel::new(cfg(32, 16, 4, 32, 2)).unwrap();
        let big = m.extend_max_seq_len(128).unwrap();
        assert_eq!(big.max_seq_len(), 128);
        let tokens: Vec<u32> = (0..16).map(|i| (i * 5 % 28) as u32).collect();
        let a = m.embed_tokens(&tokens).unwrap();
        let b = big.embed_tokens(&tokens).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mlm_loss_gradient_check() {
        let mut m = EncoderModel::new(cfg(32, 16, 4, 16, 1)).unwrap();
        let ids: Vec<u32> = vec![1, 31, 5, 9, 31, 2, 7, 3, 28, 28, 28, 28, 28, 28, 28, 28];
        let valid: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let targets = [(1usize, 4usize), (4, 11)];
        let config = m.config().clone();
        let store = std::mem::take(m.params_mut());
        let mut store = store;
        let report = grad_check_sampled(&mut store, 1e-5, 12, |s, g| {
            let model = EncoderModel::from_params(config.clone(), s.clone())?;
            let x = model.forward(g, &ids, &valid, true)?;
            let logits = model.mlm_logits(g, x, true)?;
            let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
            let picked = g.gather_rows(logits, &rows)?;
            let labels: Vec<usize> = targets.iter().map(|t| t.1).collect();
            g.cross_entropy_rows(picked, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
