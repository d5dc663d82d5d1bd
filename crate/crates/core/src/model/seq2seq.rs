//! Post-norm transformer encoder-decoder with full scaled dot-product
//! attention.

use microcast_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, DAYS_OF_YEAR, HOURS_OF_DAY};
use super::params::{fan_in_uniform, ParamStore, BACKBONE};
use crate::error::{Error, Result};
use crate::time::{day_of_year, hour_of_day};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncLayer {
    attn: Attn,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct DecLayer {
    self_attn: Attn,
    norm1: Norm,
    cross: Attn,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_value: usize,
    dec_value: usize,
    hour: usize,
    doy: usize,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    head: Linear,
}

type Reg<'a> = dyn FnMut(&str, &[usize], Init) -> Result<usize> + 'a;

fn linear(reg: &mut Reg, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
    Ok(Linear {
        w: reg(&format!("{name}.w"), &[fan_in, fan_out], Init::FanIn(fan_in))?,
        b: reg(&format!("{name}.b"), &[fan_out], Init::FanIn(fan_in))?,
    })
}

fn attn(reg: &mut Reg, name: &str, d: usize) -> Result<Attn> {
    Ok(Attn {
        q: linear(reg, &format!("{name}.q"), d, d)?,
        k: linear(reg, &format!("{name}.k"), d, d)?,
        v: linear(reg, &format!("{name}.v"), d, d)?,
        o: linear(reg, &format!("{name}.o"), d, d)?,
    })
}

fn norm(reg: &mut Reg, name: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        gain: reg(&format!("{name}.gain"), &[d], Init::Ones)?,
        bias: reg(&format!("{name}.bias"), &[d], Init::Zeros)?,
    })
}

fn ffn(reg: &mut Reg, name: &str, d: usize, di: usize) -> Result<Ffn> {
    Ok(Ffn {
        up: linear(reg, &format!("{name}.up"), d, di)?,
        down: linear(reg, &format!("{name}.down"), di, d)?,
    })
}

fn layout(c: &ModelConfig, reg: &mut Reg) -> Result<Layout> {
    let d = c.d_model;
    let p = |s: &str| format!("{BACKBONE}{s}");
    let enc_value = reg(&p("embed.enc_value"), &[c.n_features, d], Init::FanIn(c.n_features))?;
    let dec_value = reg(&p("embed.dec_value"), &[1, d], Init::FanIn(1))?;
    let hour = reg(&p("embed.hour"), &[HOURS_OF_DAY, d], Init::FanIn(HOURS_OF_DAY))?;
    let doy = reg(&p("embed.doy"), &[DAYS_OF_YEAR, d], Init::FanIn(DAYS_OF_YEAR))?;
    let mut enc = Vec::with_capacity(c.enc_layers);
    for l in 0..c.enc_layers {
        let n = p(&format!("enc{l}"));
        enc.push(EncLayer {
            attn: attn(reg, &format!("{n}.attn"), d)?,
            norm1: norm(reg, &format!("{n}.norm1"), d)?,
            ffn: ffn(reg, &format!("{n}.ffn"), d, c.d_inner)?,
            norm2: norm(reg, &format!("{n}.norm2"), d)?,
        });
    }
    let mut dec = Vec::with_capacity(c.dec_layers);
    for l in 0..c.dec_layers {
        let n = p(&format!("dec{l}"));
        dec.push(DecLayer {
            self_attn: attn(reg, &format!("{n}.self_attn"), d)?,
            norm1: norm(reg, &format!("{n}.norm1"), d)?,
            cross: attn(reg, &format!("{n}.cross_attn"), d)?,
            norm2: norm(reg, &format!("{n}.norm2"), d)?,
            ffn: ffn(reg, &format!("{n}.ffn"), d, c.d_inner)?,
            norm3: norm(reg, &format!("{n}.norm3"), d)?,
        });
    }
    let head = linear(reg, &p("head"), d, 1)?;
    Ok(Layout {
        enc_value,
        dec_value,
        hour,
        doy,
        enc,
        dec,
        head,
    })
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

/// Per-pass binding of stored parameters onto a tape, plus the dropout stream.
pub struct Forward<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, u64)>,
    calls: u64,
}

impl<'a> Forward<'a> {
    /// Deterministic pass with dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
            dropout: None,
            calls: 0,
        }
    }

    /// Training pass; every dropout mask derives from `seed` and call order.
    pub fn train(store: &'a ParamStore, p: f64, seed: u64) -> Self {
        Self {
            dropout: (p > 0.0).then_some((p, seed)),
            ..Self::eval(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Uses `var` for parameter `index` instead of a fresh leaf; lets callers
    /// treat parameters as ordinary watched inputs.
    pub fn preset(&mut self, index: usize, var: Var) {
        self.bound[index] = Some(var);
    }

    pub fn param(&mut self, tape: &mut Tape, index: usize) -> Var {
        if let Some(v) = self.bound[index] {
            return v;
        }
        let v = tape.param(index, &self.store.tensors()[index]);
        self.bound[index] = Some(v);
        v
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some((p, seed)) = self.dropout else { return Ok(x) };
        self.calls += 1;
        let mixed = seed ^ self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(tape.dropout(x, p, mixed)?)
    }

    fn linear(&mut self, tape: &mut Tape, x: Var, l: &Linear) -> Result<Var> {
        let w = self.param(tape, l.w);
        let b = self.param(tape, l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn norm(&mut self, tape: &mut Tape, x: Var, n: &Norm) -> Result<Var> {
        let g = self.param(tape, n.gain);
        let b = self.param(tape, n.bias);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    layout: Layout,
    pe: Tensor,
    causal: Tensor,
}

impl Seq2Seq {
    fn from_layout(config: ModelConfig, layout: Layout) -> Self {
        let max_len = config.lx.max(config.dec_len());
        let pe = positional_encoding(max_len, config.d_model);
        let n = config.dec_len();
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                mask[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let causal = Tensor::new(vec![n, n], mask).expect("square mask");
        Self {
            config,
            layout,
            pe,
            causal,
        }
    }

    /// Adds freshly initialised backbone parameters to `store`.
    pub fn init(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = layout(&config, &mut |name, shape, init| {
            let t = match init {
                Init::FanIn(f) => fan_in_uniform(&mut rng, shape, f),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Zeros => Tensor::zeros(shape),
            };
            store.insert(name, t)
        })?;
        Ok(Self::from_layout(config, layout))
    }

    /// Binds to parameters already in `store`, checking every shape.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = layout(&config, &mut |name, shape, _| store.expect(name, shape))?;
        Ok(Self::from_layout(config, layout))
    }

    fn time_rows(&self, first_hour: i64, len: usize) -> (Vec<usize>, Vec<usize>) {
        (0..len as i64)
            .map(|i| (hour_of_day(first_hour + i), day_of_year(first_hour + i)))
            .unzip()
    }

    fn add_encodings(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        values: Var,
        first_hour: i64,
        len: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let pe = Tensor::new(vec![len, d], self.pe.data()[..len * d].to_vec())?;
        let pe = tape.constant(pe);
        let (hours, days) = self.time_rows(first_hour, len);
        let ht = fw.param(tape, self.layout.hour);
        let dt = fw.param(tape, self.layout.doy);
        let h = tape.gather_rows(ht, &hours)?;
        let dy = tape.gather_rows(dt, &days)?;
        let s = tape.add(values, pe)?;
        let s = tape.add(s, h)?;
        let s = tape.add(s, dy)?;
        fw.dropout(tape, s)
    }

    /// Value projection plus positional, hour-of-day and day-of-year
    /// encodings for an `L_x × n_features` window starting at `first_hour`.
    pub fn embed_input(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        x: &[f64],
        first_hour: i64,
    ) -> Result<Var> {
        let c = &self.config;
        if x.len() != c.lx * c.n_features {
            return Err(Error::Contract(format!(
                "input window has {} values, expected {}×{}",
                x.len(),
                c.lx,
                c.n_features
            )));
        }
        let xv = tape.constant(Tensor::new(vec![c.lx, c.n_features], x.to_vec())?);
        let w = fw.param(tape, self.layout.enc_value);
        let v = tape.matmul(xv, w)?;
        self.add_encodings(tape, fw, v, first_hour, c.lx)
    }

    /// Decoder input: `label_len` known values then `L_y` zeros.
    pub fn embed_decoder(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        context: &[f64],
        first_hour: i64,
    ) -> Result<Var> {
        let c = &self.config;
        if context.len() != c.label_len {
            return Err(Error::Contract(format!(
                "decoder context has {} values, expected {}",
                context.len(),
                c.label_len
            )));
        }
        let mut vals = context.to_vec();
        vals.resize(c.dec_len(), 0.0);
        let xv = tape.constant(Tensor::new(vec![c.dec_len(), 1], vals)?);
        let w = fw.param(tape, self.layout.dec_value);
        let v = tape.matmul(xv, w)?;
        self.add_encodings(tape, fw, v, first_hour, c.dec_len())
    }

    fn attention(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        a: &Attn,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let q = fw.linear(tape, q_in, &a.q)?;
        let k = fw.linear(tape, kv_in, &a.k)?;
        let v = fw.linear(tape, kv_in, &a.v)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = causal.then(|| tape.constant(self.causal.clone()));
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, i * dh, dh)?,
                    tape.slice_cols(k, i * dh, dh)?,
                    tape.slice_cols(v, i * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let p = tape.softmax(s, 1)?;
            let p = fw.dropout(tape, p)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        fw.linear(tape, o, &a.o)
    }

    fn feed_forward(&self, tape: &mut Tape, fw: &mut Forward, f: &Ffn, x: Var) -> Result<Var> {
        let u = fw.linear(tape, x, &f.up)?;
        let u = tape.gelu(u);
        let u = fw.dropout(tape, u)?;
        fw.linear(tape, u, &f.down)
    }

    fn residual(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        x: Var,
        update: Var,
        n: &Norm,
    ) -> Result<Var> {
        let u = fw.dropout(tape, update)?;
        let s = tape.add(x, u)?;
        fw.norm(tape, s, n)
    }

    /// Encoder stack over an embedded window; returns `L_x × d_model`.
    pub fn encode(&self, tape: &mut Tape, fw: &mut Forward, emb: Var) -> Result<Var> {
        let mut x = emb;
        for layer in &self.layout.enc {
            let a = self.attention(tape, fw, &layer.attn, x, x, false)?;
            x = self.residual(tape, fw, x, a, &layer.norm1)?;
            let f = self.feed_forward(tape, fw, &layer.ffn, x)?;
            x = self.residual(tape, fw, x, f, &layer.norm2)?;
        }
        Ok(x)
    }

    /// Decoder stack and linear head; returns the `L_y × 1` forecast in
    /// normalised units.
    pub fn decode(&self, tape: &mut Tape, fw: &mut Forward, enc: Var, dec_emb: Var) -> Result<Var> {
        let mut x = dec_emb;
        for layer in &self.layout.dec {
            let a = self.attention(tape, fw, &layer.self_attn, x, x, true)?;
            x = self.residual(tape, fw, x, a, &layer.norm1)?;
            let c = self.attention(tape, fw, &layer.cross, x, enc, false)?;
            x = self.residual(tape, fw, x, c, &layer.norm2)?;
            let f = self.feed_forward(tape, fw, &layer.ffn, x)?;
            x = self.residual(tape, fw, x, f, &layer.norm3)?;
        }
        let out = fw.linear(tape, x, &self.layout.head)?;
        let c = &self.config;
        let rows: Vec<usize> = (c.label_len..c.dec_len()).collect();
        Ok(tape.gather_rows(out, &rows)?)
    }

    /// Embeds and encodes a window whose last hour is `anchor`.
    pub fn encode_window(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        x: &[f64],
        anchor: i64,
    ) -> Result<Var> {
        let first = anchor + 1 - self.config.lx as i64;
        let e = self.embed_input(tape, fw, x, first)?;
        self.encode(tape, fw, e)
    }

    /// Decodes from `enc` with the target's last `label_len` values before
    /// `anchor` as the warm start.
    pub fn decode_from(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        enc: Var,
        context: &[f64],
        anchor: i64,
    ) -> Result<Var> {
        let first = anchor + 1 - self.config.label_len as i64;
        let d = self.embed_decoder(tape, fw, context, first)?;
        self.decode(tape, fw, enc, d)
    }

    /// Plain encoder-decoder forecast from a station's own window.
    pub fn forward(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        x: &[f64],
        context: &[f64],
        anchor: i64,
    ) -> Result<Var> {
        let enc = self.encode_window(tape, fw, x, anchor)?;
        self.decode_from(tape, fw, enc, context, anchor)
    }
}

/// The last `label_len` values of column `target` in a row-major window.
pub fn decoder_context(x: &[f64], n_features: usize, target: usize, label_len: usize) -> Vec<f64> {
    let rows = x.len() / n_features;
    (rows - label_len..rows)
        .map(|r| x[r * n_features + target])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_inner: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.1,
            label_len: 4,
            lx: 8,
            ly: 4,
            n_features: 2,
        }
    }

    fn setup(c: ModelConfig) -> (ParamStore, Seq2Seq) {
        let mut store = ParamStore::new();
        let m = Seq2Seq::init(c, &mut store, 3).unwrap();
        (store, m)
    }

    fn window(c: &ModelConfig) -> Vec<f64> {
        (0..c.lx * c.n_features).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect()
    }

    fn run(m: &Seq2Seq, store: &ParamStore, x: &[f64], anchor: i64) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut fw = Forward::eval(store);
        let ctx = decoder_context(x, m.config.n_features, 0, m.config.label_len);
        let y = m.forward(&mut tape, &mut fw, x, &ctx, anchor).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn param_count_matches_closed_form() {
        for c in [micro(), ModelConfig::desk(3), ModelConfig::standard(1)] {
            let (store, _) = setup(c.clone());
            assert_eq!(store.numel(BACKBONE), c.param_count());
        }
    }

    #[test]
    fn bind_checks_shapes() {
        let (store, _) = setup(micro());
        Seq2Seq::bind(micro(), &store).unwrap();
        let mut wider = micro();
        wider.d_inner = 32;
        assert!(Seq2Seq::bind(wider, &store).is_err());
    }

    #[test]
    fn zero_projection_leaves_only_encodings() {
        let c = micro();
        let (mut store, m) = setup(c.clone());
        store
            .get_mut("backbone.embed.enc_value")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let first = 1000;
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&store);
        let e = m
            .embed_input(&mut tape, &mut fw, &vec![0.0; c.lx * c.n_features], first)
            .unwrap();
        let hour = store.get("backbone.embed.hour").unwrap();
        let doy = store.get("backbone.embed.doy").unwrap();
        let pe = positional_encoding(c.lx, c.d_model);
        let d = c.d_model;
        for p in 0..c.lx {
            let h = first + p as i64;
            for j in 0..d {
                let want = pe.at(p, j) + hour.at(hour_of_day(h), j) + doy.at(day_of_year(h), j);
                assert!((tape.value(e).at(p, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hour_encoding_repeats_daily() {
        let c = micro();
        let (store, m) = setup(c);
        let hour = store.get("backbone.embed.hour").unwrap();
        let (h0, _) = m.time_rows(5000, 8);
        let (h1, _) = m.time_rows(5024, 8);
        assert_eq!(h0, h1);
        assert_eq!(hour.row(h0[0]), hour.row(h1[0]));
    }

    #[test]
    fn output_shape_and_determinism() {
        let c = ModelConfig::desk(1);
        let (store, m) = setup(c.clone());
        let x: Vec<f64> = (0..c.lx).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = run(&m, &store, &x, 20_000);
        assert_eq!(a.len(), 24);
        assert!(a.iter().all(|v| v.is_finite()));
        let b = run(&m, &store, &x, 20_000);
        assert_eq!(a, b);
    }

    #[test]
    fn standard_encoder_width() {
        let c = ModelConfig {
            enc_layers: 1,
            ..ModelConfig::standard(1)
        };
        let (store, m) = setup(c.clone());
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&store);
        let e = m
            .encode_window(&mut tape, &mut fw, &vec![0.5; c.lx], 100)
            .unwrap();
        assert_eq!(tape.shape(e), &[48, 128]);
    }

    #[test]
    fn feature_count_mismatch_is_an_error() {
        let c = micro();
        let (store, m) = setup(c.clone());
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&store);
        assert!(m.embed_input(&mut tape, &mut fw, &[0.0; 3], 0).is_err());
    }

    #[test]
    fn encoder_is_position_sensitive() {
        let c = micro();
        let (store, m) = setup(c.clone());
        let x = window(&c);
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&store);
        let e1 = m.encode_window(&mut tape, &mut fw, &x, 300).unwrap();
        let base = tape.value(e1).clone();

        let mut shuffled = m.clone();
        let d = c.d_model;
        let mut rows: Vec<Vec<f64>> = (0..shuffled.pe.shape()[0])
            .map(|r| shuffled.pe.row(r).to_vec())
            .collect();
        rows[..c.lx].reverse();
        shuffled.pe = Tensor::new(shuffled.pe.shape().to_vec(), rows.concat()).unwrap();
        assert_eq!(shuffled.pe.shape()[1], d);
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&store);
        let e2 = shuffled.encode_window(&mut tape, &mut fw, &x, 300).unwrap();
        assert_ne!(tape.value(e2).data(), base.data());
    }

    #[test]
    fn decoder_reads_the_encoder() {
        let c = micro();
        let (store, m) = setup(c.clone());
        let x = window(&c);
        let ctx = decoder_context(&x, c.n_features, 0, c.label_len);
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&store);
        let enc = m.encode_window(&mut tape, &mut fw, &x, 300).unwrap();
        let y1 = m.decode_from(&mut tape, &mut fw, enc, &ctx, 300).unwrap();
        let zero = tape.constant(Tensor::zeros(&[c.lx, c.d_model]));
        let y2 = m.decode_from(&mut tape, &mut fw, zero, &ctx, 300).unwrap();
        assert_ne!(tape.value(y1).data(), tape.value(y2).data());
    }

    #[test]
    fn dropout_depends_only_on_seed() {
        let c = micro();
        let (store, m) = setup(c.clone());
        let x = window(&c);
        let ctx = decoder_context(&x, c.n_features, 0, c.label_len);
        let out = |seed| {
            let mut tape = Tape::new();
            let mut fw = Forward::train(&store, 0.3, seed);
            let y = m.forward(&mut tape, &mut fw, &x, &ctx, 77).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(out(1), out(1));
        assert_ne!(out(1), out(2));
    }

    #[test]
    fn context_is_the_window_tail() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        // three rows of four features
        assert_eq!(decoder_context(&x, 4, 1, 2), vec![5.0, 9.0]);
    }
}
