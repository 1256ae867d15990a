//! Tape-based reverse-mode differentiation over vectors.
//!
//! A [`Graph`] borrows the parameter store immutably, so independent examples
//! can be evaluated on separate graphs concurrently. [`Graph::backward`]
//! accumulates parameter gradients into a caller-owned [`Gradients`].

use crate::geo::{haversine_term, GeoPoint, EARTH_RADIUS_M};

use super::{Gradients, NnError, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Embed {
        table: ParamId,
        col: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Softmax(Var),
    DotConst(Var, Vec<f64>),
    WeightedPoint(Var, Vec<GeoPoint>),
    Haversine(Var, GeoPoint),
    HaversineOffset(Var, GeoPoint),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Debug)]
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
}

/// Gradients of the output with respect to every node of the tape.
#[derive(Debug)]
pub struct NodeGrads(Vec<Vec<f64>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.0[v.0]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value)
    }

    /// A whole parameter tensor, flattened.
    pub fn param(&mut self, p: ParamId) -> Var {
        let value = self.params.get(p).data().to_vec();
        self.push(Op::Param(p), value)
    }

    /// `W x + b` for a `[rows × cols]` matrix `W`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Result<Var, NnError> {
        let wt = self.params.get(w);
        let (rows, cols) = (wt.rows(), wt.cols());
        let xv = self.value(x);
        if wt.shape().len() != 2 || xv.len() != cols {
            return Err(shape_err(format!(
                "affine {}: matrix {:?} with input of length {}",
                self.params.name(w),
                wt.shape(),
                xv.len()
            )));
        }
        let mut y = match b {
            Some(b) => {
                let bt = self.params.get(b);
                if bt.len() != rows {
                    return Err(shape_err(format!(
                        "bias {} has length {}, need {rows}",
                        self.params.name(b),
                        bt.len()
                    )));
                }
                bt.data().to_vec()
            }
            None => vec![0.0; rows],
        };
        let wd = wt.data();
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            *yr += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(Op::Affine { w, b, x }, y))
    }

    /// Column `col` of an `[embed_dim × vocab]` table.
    pub fn embed(&mut self, table: ParamId, col: usize) -> Result<Var, NnError> {
        let t = self.params.get(table);
        let (dim, vocab) = (t.rows(), t.cols());
        if col >= vocab {
            return Err(NnError::IndexOutOfRange {
                table: self.params.name(table).to_string(),
                index: col,
                vocab,
            });
        }
        let value = (0..dim).map(|r| t.data()[r * vocab + col]).collect();
        Ok(self.push(Op::Embed { table, col }, value))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(shape_err(format!("{what}: lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_len(a, b, "add")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_len(a, b, "mul")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a), v)
    }

    /// Concatenation in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts
            .iter()
            .flat_map(|&p| self.value(p).iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let av = self.value(a);
        if start + len > av.len() {
            return Err(shape_err(format!(
                "slice {start}..{} of length {}",
                start + len,
                av.len()
            )));
        }
        let v = av[start..start + len].to_vec();
        Ok(self.push(Op::Slice(a, start), v))
    }

    /// Softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let max = av.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut v: Vec<f64> = av.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= total);
        self.push(Op::Softmax(a), v)
    }

    /// Scalar `sum_i a_i c_i` with constant `c`.
    pub fn dot_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var, NnError> {
        let av = self.value(a);
        if av.len() != c.len() {
            return Err(shape_err(format!(
                "dot: lengths {} and {}",
                av.len(),
                c.len()
            )));
        }
        let v = av.iter().zip(&c).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::DotConst(a, c), vec![v]))
    }

    /// `[sum_i w_i lat_i, sum_i w_i lon_i]` over constant points.
    pub fn weighted_point(&mut self, w: Var, points: Vec<GeoPoint>) -> Result<Var, NnError> {
        let wv = self.value(w);
        if wv.len() != points.len() {
            return Err(shape_err(format!(
                "weighted point: {} weights, {} points",
                wv.len(),
                points.len()
            )));
        }
        let (lat, lon) = wv
            .iter()
            .zip(&points)
            .fold((0.0, 0.0), |(lat, lon), (w, p)| {
                (lat + w * p.lat, lon + w * p.lon)
            });
        Ok(self.push(Op::WeightedPoint(w, points), vec![lat, lon]))
    }

    /// Haversine distance in meters from a `[lat, lon]` node to a fixed point.
    pub fn haversine_to(&mut self, p: Var, target: GeoPoint) -> Result<Var, NnError> {
        let pv = self.value(p);
        if pv.len() != 2 {
            return Err(shape_err(format!(
                "haversine needs [lat, lon], got length {}",
                pv.len()
            )));
        }
        let a = haversine_term(GeoPoint::new(pv[0], pv[1]), target);
        let d = 2.0 * EARTH_RADIUS_M * (a / (1.0 - a)).sqrt().atan();
        Ok(self.push(Op::Haversine(p, target), vec![d]))
    }

    /// Haversine distance in meters between `origin + delta` and `origin`,
    /// where `delta` is a `[dlat, dlon]` node in degrees. Working with the
    /// offset avoids the cancellation of subtracting nearby absolute
    /// coordinates.
    pub fn haversine_offset(&mut self, delta: Var, origin: GeoPoint) -> Result<Var, NnError> {
        let dv = self.value(delta);
        if dv.len() != 2 {
            return Err(shape_err(format!(
                "haversine needs [dlat, dlon], got length {}",
                dv.len()
            )));
        }
        let a = offset_term(dv[0], dv[1], origin);
        let d = 2.0 * EARTH_RADIUS_M * (a / (1.0 - a)).sqrt().atan();
        Ok(self.push(Op::HaversineOffset(delta, origin), vec![d]))
    }

    /// Element-wise sum of equal-length nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Back-propagates from the scalar `out`, adding parameter gradients
    /// into `grads`.
    pub fn backward(&self, out: Var, grads: &mut Gradients) -> Result<NodeGrads, NnError> {
        if self.value(out).len() != 1 {
            return Err(shape_err("backward needs a scalar output".into()));
        }
        let mut g: Vec<Vec<f64>> = self.nodes[..=out.0]
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        g[out.0][0] = 1.0;
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if g[i].iter().all(|&x| x == 0.0) {
                continue;
            }
            let dy = std::mem::take(&mut g[i]);
            match &node.op {
                Op::Input => {}
                Op::Param(p) => grads
                    .get_mut(*p)
                    .data_mut()
                    .iter_mut()
                    .zip(&dy)
                    .for_each(|(a, d)| *a += d),
                Op::Affine { w, b, x } => {
                    let wt = self.params.get(*w);
                    let cols = wt.cols();
                    let xv = &self.nodes[x.0].value;
                    {
                        let gw = grads.get_mut(*w).data_mut();
                        for (r, &d) in dy.iter().enumerate() {
                            if d != 0.0 {
                                for (gwc, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                    *gwc += d * xc;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        grads
                            .get_mut(*b)
                            .data_mut()
                            .iter_mut()
                            .zip(&dy)
                            .for_each(|(a, d)| *a += d);
                    }
                    let wd = wt.data();
                    let gx = &mut g[x.0];
                    for (r, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            for (gxc, wrc) in gx.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                                *gxc += d * wrc;
                            }
                        }
                    }
                }
                Op::Embed { table, col } => {
                    let vocab = self.params.get(*table).cols();
                    let gt = grads.get_mut(*table).data_mut();
                    for (r, d) in dy.iter().enumerate() {
                        gt[r * vocab + col] += d;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[a.0], &dy);
                    accumulate(&mut g[b.0], &dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da: Vec<f64> = dy.iter().zip(bv).map(|(d, y)| d * y).collect();
                    let db: Vec<f64> = dy.iter().zip(av).map(|(d, x)| d * x).collect();
                    accumulate(&mut g[a.0], &da);
                    accumulate(&mut g[b.0], &db);
                }
                Op::Scale(a, k) => {
                    for (ga, d) in g[a.0].iter_mut().zip(&dy) {
                        *ga += d * k;
                    }
                }
                Op::Sigmoid(a) => {
                    for ((ga, d), s) in g[a.0].iter_mut().zip(&dy).zip(&node.value) {
                        *ga += d * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    for ((ga, d), t) in g[a.0].iter_mut().zip(&dy).zip(&node.value) {
                        *ga += d * (1.0 - t * t);
                    }
                }
                Op::Relu(a) => {
                    for ((ga, d), y) in g[a.0].iter_mut().zip(&dy).zip(&node.value) {
                        if *y > 0.0 {
                            *ga += d;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut g[p.0], &dy[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    accumulate(&mut g[a.0][*start..*start + dy.len()], &dy);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let inner: f64 = dy.iter().zip(s).map(|(d, s)| d * s).sum();
                    for ((ga, d), s) in g[a.0].iter_mut().zip(&dy).zip(s) {
                        *ga += s * (d - inner);
                    }
                }
                Op::DotConst(a, c) => {
                    for (ga, ci) in g[a.0].iter_mut().zip(c) {
                        *ga += dy[0] * ci;
                    }
                }
                Op::WeightedPoint(w, points) => {
                    for (gw, p) in g[w.0].iter_mut().zip(points.iter()) {
                        *gw += dy[0] * p.lat + dy[1] * p.lon;
                    }
                }
                Op::HaversineOffset(p, origin) => {
                    let dv = &self.nodes[p.0].value;
                    let (dlat, dlon) = offset_grad(dv[0], dv[1], *origin);
                    g[p.0][0] += dy[0] * dlat;
                    g[p.0][1] += dy[0] * dlon;
                }
                Op::Haversine(p, target) => {
                    let pv = &self.nodes[p.0].value;
                    let (dlat, dlon) = haversine_grad(GeoPoint::new(pv[0], pv[1]), *target);
                    g[p.0][0] += dy[0] * dlat;
                    g[p.0][1] += dy[0] * dlon;
                }
            }
            g[i] = dy;
        }
        Ok(NodeGrads(g))
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Partial derivatives of the haversine distance with respect to the
/// first point's latitude and longitude, in meters per degree. Zero where
/// the clamped term sits at a bound.
pub fn haversine_grad(p: GeoPoint, target: GeoPoint) -> (f64, f64) {
    let a = haversine_term(p, target);
    if a <= 0.0 || a >= A_MAX {
        return (0.0, 0.0);
    }
    let (phi_a, phi_b) = (p.lat.to_radians(), target.lat.to_radians());
    let dphi = phi_b - phi_a;
    let dlambda = (target.lon - p.lon).to_radians();
    let sin2_half_dl = (dlambda / 2.0).sin().powi(2);
    let da_dphi = -0.5 * dphi.sin() - phi_a.sin() * phi_b.cos() * sin2_half_dl;
    let da_dlambda = -0.5 * phi_a.cos() * phi_b.cos() * dlambda.sin();
    let dd_da = EARTH_RADIUS_M / (a * (1.0 - a)).sqrt();
    let per_degree = std::f64::consts::PI / 180.0;
    (
        dd_da * da_dphi * per_degree,
        dd_da * da_dlambda * per_degree,
    )
}

const A_MAX: f64 = 1.0 - 1e-12;

/// Haversine term between `origin + (dlat, dlon)` and `origin`.
fn offset_term(dlat: f64, dlon: f64, origin: GeoPoint) -> f64 {
    let phi_b = origin.lat.to_radians();
    let dphi = dlat.to_radians();
    let phi_a = phi_b + dphi;
    let term = (dphi / 2.0).sin().powi(2)
        + phi_a.cos() * phi_b.cos() * (dlon.to_radians() / 2.0).sin().powi(2);
    term.clamp(0.0, A_MAX)
}

fn offset_grad(dlat: f64, dlon: f64, origin: GeoPoint) -> (f64, f64) {
    let a = offset_term(dlat, dlon, origin);
    if a <= 0.0 || a >= A_MAX {
        return (0.0, 0.0);
    }
    let phi_b = origin.lat.to_radians();
    let dphi = dlat.to_radians();
    let phi_a = phi_b + dphi;
    let dlambda = dlon.to_radians();
    let da_dphi = 0.5 * dphi.sin() - phi_a.sin() * phi_b.cos() * (dlambda / 2.0).sin().powi(2);
    let da_dlambda = 0.5 * phi_a.cos() * phi_b.cos() * dlambda.sin();
    let dd_da = EARTH_RADIUS_M / (a * (1.0 - a)).sqrt();
    let per_degree = std::f64::consts::PI / 180.0;
    (
        dd_da * da_dphi * per_degree,
        dd_da * da_dlambda * per_degree,
    )
}
