use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Init, NnError, ParamId, ParamStore, Var};

/// Lookup table of shape `[embed_dim × vocab]`; column `i` embeds id `i`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(&format!("{name}.table"), &[dim, vocab], Init::Glorot, rng);
        Self { table, dim, vocab }
    }

    pub fn lookup(&self, g: &mut Graph, id: usize) -> Result<Var, NnError> {
        g.embed(self.table, id)
    }

    /// One node per id; ids at masked-out positions are skipped.
    pub fn lookup_seq(
        &self,
        g: &mut Graph,
        ids: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Vec<Var>, NnError> {
        ids.iter()
            .enumerate()
            .filter(|(n, _)| mask.is_none_or(|m| m[*n]))
            .map(|(_, &id)| g.embed(self.table, id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[output, input], Init::Glorot, rng);
        let b = store.add(&format!("{name}.b"), &[output], Init::Zeros, rng);
        Self {
            w,
            b,
            activation,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let z = g.affine(self.w, Some(self.b), x)?;
        Ok(match self.activation {
            Activation::Identity => z,
            Activation::Relu => g.relu(z),
            Activation::Tanh => g.tanh(z),
            Activation::Sigmoid => g.sigmoid(z),
        })
    }
}

/// One LSTM layer. Gates are stacked as `[i; f; g; o]` in a single
/// `[4H × (D + H)]` matrix acting on `concat(x_t, h_{t-1})`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            &[4 * hidden, input + hidden],
            Init::Glorot,
            rng,
        );
        let b = store.add(&format!("{name}.b"), &[4 * hidden], Init::Zeros, rng);
        store.get_mut(b).data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w,
            b,
            input,
            hidden,
        }
    }

    /// One cell step; returns `(h_t, c_t)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var), NnError> {
        let hd = self.hidden;
        let xh = g.concat(&[x, h]);
        let z = g.affine(self.w, Some(self.b), xh)?;
        let zi = g.slice(z, 0, hd)?;
        let zf = g.slice(z, hd, hd)?;
        let zg = g.slice(z, 2 * hd, hd)?;
        let zo = g.slice(z, 3 * hd, hd)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// All hidden states for the given inputs, starting from zero state.
    pub fn forward_seq(&self, g: &mut Graph, inputs: &[Var]) -> Result<Vec<Var>, NnError> {
        let mut h = g.input(vec![0.0; self.hidden]);
        let mut c = g.input(vec![0.0; self.hidden]);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            (h, c) = self.step(g, x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Many-to-one stack: returns the top layer's hidden state after the last
/// unmasked step.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let d = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{name}.{l}"), d, hidden, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    /// Masked steps leave the state untouched, so they are simply not fed.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &[Var],
        mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let mut seq: Vec<Var> = inputs
            .iter()
            .enumerate()
            .filter(|(n, _)| mask.is_none_or(|m| m[*n]))
            .map(|(_, &v)| v)
            .collect();
        if seq.is_empty() {
            return Err(NnError::Shape(
                "LSTM needs at least one unmasked step".into(),
            ));
        }
        for layer in &self.layers {
            seq = layer.forward_seq(g, &seq)?;
        }
        Ok(*seq.last().expect("non-empty"))
    }
}
