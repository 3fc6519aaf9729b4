//! Pointer heads (start/end probability vectors) and the 2D span head.
//!
//! Both heads interact every position with the `[CLS]` row of `H`. With
//! interactive attention ablated, each head instead runs a single linear
//! layer over `[h_i ; cls]`.

use rand::Rng;

use crate::encoder::EncodedSeq;
use crate::error::{Error, Result};
use crate::numkernel::{param_block, ParamSet, Tape, Tensor2, Var};

param_block! {
    /// `h = gelu(W h_o + b_w)`, `p_h = talu(h · cls)`, `p_c = talu(v · h_o + b_v)`.
    PointerParams => PointerVars { w, b_w, v, b_v }
}

param_block! {
    /// Ablated pointer: `talu(w_cat · [h_i ; cls] + b_cat)`.
    PointerConcatParams => PointerConcatVars { w_cat, b_cat }
}

param_block! {
    /// Gated interactive attention and the four candidate matrices.
    TwoDPParams => TwoDPVars { w_g, b_g, w_2d, b_2d, v_row, b_row, v_col, b_col }
}

param_block! {
    /// Ablated 2D head: `z = gelu(W_cat [h_i ; cls] + b_cat)`, `m = talu(z zᵀ)`.
    TwoDPConcatParams => TwoDPConcatVars { w_cat, b_cat }
}

fn matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    Tensor2::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
}

impl PointerParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        PointerParams {
            w: matrix(d, d, rng),
            b_w: Tensor2::zeros(1, d),
            v: matrix(1, d, rng),
            b_v: Tensor2::zeros(1, 1),
        }
    }

    pub fn zeros(d: usize) -> Self {
        PointerParams {
            w: Tensor2::zeros(d, d),
            b_w: Tensor2::zeros(1, d),
            v: Tensor2::zeros(1, d),
            b_v: Tensor2::zeros(1, 1),
        }
    }

    fn dim(&self) -> usize {
        self.w.cols()
    }
}

impl PointerConcatParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        PointerConcatParams {
            w_cat: matrix(1, 2 * d, rng),
            b_cat: Tensor2::zeros(1, 1),
        }
    }

    fn dim(&self) -> usize {
        self.w_cat.cols() / 2
    }
}

impl TwoDPParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        TwoDPParams {
            w_g: matrix(d, d, rng),
            b_g: Tensor2::zeros(1, d),
            w_2d: matrix(d, d, rng),
            b_2d: Tensor2::zeros(1, d),
            v_row: matrix(1, d, rng),
            b_row: Tensor2::zeros(1, 1),
            v_col: matrix(1, d, rng),
            b_col: Tensor2::zeros(1, 1),
        }
    }

    pub fn zeros(d: usize) -> Self {
        TwoDPParams {
            w_g: Tensor2::zeros(d, d),
            b_g: Tensor2::zeros(1, d),
            w_2d: Tensor2::zeros(d, d),
            b_2d: Tensor2::zeros(1, d),
            v_row: Tensor2::zeros(1, d),
            b_row: Tensor2::zeros(1, 1),
            v_col: Tensor2::zeros(1, d),
            b_col: Tensor2::zeros(1, 1),
        }
    }

    fn dim(&self) -> usize {
        self.w_g.cols()
    }
}

impl TwoDPConcatParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        TwoDPConcatParams {
            w_cat: matrix(d, 2 * d, rng),
            b_cat: Tensor2::zeros(1, d),
        }
    }

    fn dim(&self) -> usize {
        self.w_cat.rows()
    }
}

/// Which parts of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Ablation {
    pub interactive_attention: bool,
    pub two_dp: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            interactive_attention: true,
            two_dp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointerHead {
    Interactive(PointerParams),
    Concat(PointerConcatParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TwoDPHead {
    Interactive(TwoDPParams),
    Concat(TwoDPConcatParams),
}

/// Start pointer, end pointer and (unless ablated) the 2D head.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub start: PointerHead,
    pub end: PointerHead,
    pub two_dp: Option<TwoDPHead>,
}

#[derive(Debug, Clone, Copy)]
enum PointerHeadVars {
    Interactive(PointerVars),
    Concat(PointerConcatVars),
}

#[derive(Debug, Clone, Copy)]
enum TwoDPHeadVars {
    Interactive(TwoDPVars),
    Concat(TwoDPConcatVars),
}

#[derive(Debug, Clone, Copy)]
pub struct HeadsVars {
    start: PointerHeadVars,
    end: PointerHeadVars,
    two_dp: Option<TwoDPHeadVars>,
}

/// Tape nodes of one head evaluation.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    /// `l x 1`
    pub s: Var,
    /// `l x 1`
    pub e: Var,
    /// `l x l`, absent when the 2D head is ablated
    pub m: Option<Var>,
    /// Interactive attention matrix `talu(h_2D h_fᵀ)`.
    pub attention: Option<Var>,
}

/// Head probabilities before any structural masking.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub m: Option<Tensor2>,
    pub attention: Option<Tensor2>,
}

impl PointerHead {
    fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> PointerHeadVars {
        match self {
            PointerHead::Interactive(p) => PointerHeadVars::Interactive(p.bind(tape)),
            PointerHead::Concat(p) => PointerHeadVars::Concat(p.bind(tape)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor2)) {
        match self {
            PointerHead::Interactive(p) => p.visit(prefix, f),
            PointerHead::Concat(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        match self {
            PointerHead::Interactive(p) => p.visit_mut(prefix, f),
            PointerHead::Concat(p) => p.visit_mut(prefix, f),
        }
    }

    fn dim(&self) -> usize {
        match self {
            PointerHead::Interactive(p) => p.dim(),
            PointerHead::Concat(p) => p.dim(),
        }
    }
}

impl TwoDPHead {
    fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> TwoDPHeadVars {
        match self {
            TwoDPHead::Interactive(p) => TwoDPHeadVars::Interactive(p.bind(tape)),
            TwoDPHead::Concat(p) => TwoDPHeadVars::Concat(p.bind(tape)),
        }
    }

    fn dim(&self) -> usize {
        match self {
            TwoDPHead::Interactive(p) => p.dim(),
            TwoDPHead::Concat(p) => p.dim(),
        }
    }
}

impl ParamSet for Heads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor2)) {
        self.start.visit(&format!("{prefix}start."), f);
        self.end.visit(&format!("{prefix}end."), f);
        match &self.two_dp {
            Some(TwoDPHead::Interactive(p)) => p.visit(&format!("{prefix}twodp."), f),
            Some(TwoDPHead::Concat(p)) => p.visit(&format!("{prefix}twodp."), f),
            None => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        self.start.visit_mut(&format!("{prefix}start."), f);
        self.end.visit_mut(&format!("{prefix}end."), f);
        match &mut self.two_dp {
            Some(TwoDPHead::Interactive(p)) => p.visit_mut(&format!("{prefix}twodp."), f),
            Some(TwoDPHead::Concat(p)) => p.visit_mut(&format!("{prefix}twodp."), f),
            None => {}
        }
    }
}

impl Heads {
    pub fn init<R: Rng + ?Sized>(d: usize, ablation: Ablation, rng: &mut R) -> Self {
        let pointer = |rng: &mut R| {
            if ablation.interactive_attention {
                PointerHead::Interactive(PointerParams::init(d, rng))
            } else {
                PointerHead::Concat(PointerConcatParams::init(d, rng))
            }
        };
        let start = pointer(rng);
        let end = pointer(rng);
        let two_dp = ablation.two_dp.then(|| {
            if ablation.interactive_attention {
                TwoDPHead::Interactive(TwoDPParams::init(d, rng))
            } else {
                TwoDPHead::Concat(TwoDPConcatParams::init(d, rng))
            }
        });
        Heads { start, end, two_dp }
    }

    /// Ablation flags implied by the parameter variants; `None` when the
    /// variants disagree with each other.
    pub fn ablation(&self) -> Option<Ablation> {
        use PointerHead as P;
        let interactive = match (&self.start, &self.end) {
            (P::Interactive(_), P::Interactive(_)) => true,
            (P::Concat(_), P::Concat(_)) => false,
            _ => return None,
        };
        match &self.two_dp {
            Some(TwoDPHead::Interactive(_)) if !interactive => return None,
            Some(TwoDPHead::Concat(_)) if interactive => return None,
            _ => {}
        }
        Some(Ablation {
            interactive_attention: interactive,
            two_dp: self.two_dp.is_some(),
        })
    }

    pub fn check(&self, ablation: Ablation, d: usize) -> Result<()> {
        match self.ablation() {
            Some(a) if a == ablation => {}
            found => {
                return Err(Error::Config(format!(
                    "head parameters ({found:?}) do not match configuration {ablation:?}"
                )))
            }
        }
        let dims = [
            Some(self.start.dim()),
            Some(self.end.dim()),
            self.two_dp.as_ref().map(TwoDPHead::dim),
        ];
        for found in dims.into_iter().flatten() {
            if found != d {
                return Err(Error::Mismatch {
                    what: "head dimension",
                    expected: d,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> HeadsVars {
        HeadsVars {
            start: self.start.bind(tape),
            end: self.end.bind(tape),
            two_dp: self.two_dp.as_ref().map(|h| h.bind(tape)),
        }
    }
}

fn pointer_nodes(tape: &mut Tape<'_>, h: Var, vars: PointerHeadVars) -> Result<Var> {
    let l = tape.value(h).rows();
    let cls = tape.rows(h, 0, 1)?;
    match vars {
        PointerHeadVars::Interactive(p) => {
            let hidden = tape.affine(h, p.w, p.b_w)?;
            let hidden = tape.gelu(hidden)?;
            let score = tape.matmul_t(hidden, cls)?;
            let p_h = tape.talu(score)?;
            let comp = tape.affine(h, p.v, p.b_v)?;
            let p_c = tape.talu(comp)?;
            tape.lin_comb(&[(p_h, 0.5), (p_c, 0.5)])
        }
        PointerHeadVars::Concat(p) => {
            let rep = tape.repeat_row(cls, l)?;
            let cat = tape.concat_cols(&[h, rep])?;
            let z = tape.affine(cat, p.w_cat, p.b_cat)?;
            tape.talu(z)
        }
    }
}

/// Returns `(m, interactive attention)`.
fn twodp_nodes(tape: &mut Tape<'_>, h: Var, vars: TwoDPHeadVars) -> Result<(Var, Var)> {
    let l = tape.value(h).rows();
    let cls = tape.rows(h, 0, 1)?;
    match vars {
        TwoDPHeadVars::Interactive(p) => {
            let h_g = tape.affine(h, p.w_g, p.b_g)?;
            let h_g = tape.gelu(h_g)?;
            let h_2d = tape.affine(h, p.w_2d, p.b_2d)?;
            let h_2d = tape.gelu(h_2d)?;
            let gate = tape.logistic(h_g)?;
            let rest = tape.one_minus(gate)?;
            let kept = tape.mul(gate, h)?;
            let mixed = tape.mul(rest, h_2d)?;
            let h_f = tape.add(kept, mixed)?;
            let sp = tape.matmul_t(h_2d, h_f)?;
            let m_sp = tape.talu(sp)?;

            let both = tape.add(h_g, h_2d)?;
            let hc = tape.matmul_t(both, cls)?;
            let m_h = tape.talu(hc)?;
            let by_row = tape.expand_cols(m_h, l)?;
            let by_col = tape.expand_rows(m_h, l)?;
            let big_h = tape.lin_comb(&[(by_row, 0.5), (by_col, 0.5)])?;

            let row = tape.affine(h_g, p.v_row, p.b_row)?;
            let m_row = tape.talu(row)?;
            let big_row = tape.expand_cols(m_row, l)?;
            let col = tape.affine(h_g, p.v_col, p.b_col)?;
            let m_col = tape.talu(col)?;
            let big_col = tape.expand_rows(m_col, l)?;

            let m = tape.lin_comb(&[
                (m_sp, 0.25),
                (big_h, 0.25),
                (big_row, 0.25),
                (big_col, 0.25),
            ])?;
            Ok((m, m_sp))
        }
        TwoDPHeadVars::Concat(p) => {
            let rep = tape.repeat_row(cls, l)?;
            let cat = tape.concat_cols(&[h, rep])?;
            let z = tape.affine(cat, p.w_cat, p.b_cat)?;
            let z = tape.gelu(z)?;
            let zz = tape.matmul_t(z, z)?;
            let m = tape.talu(zz)?;
            Ok((m, m))
        }
    }
}

/// Runs all active heads on `h`. With `dropout = Some((rate, rng))` an
/// independent dropout mask is applied to `h` before each head.
pub fn heads_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    h: Var,
    vars: &HeadsVars,
    mut dropout: Option<(f64, &mut R)>,
) -> Result<HeadNodes> {
    let mut input = |tape: &mut Tape<'_>| -> Result<Var> {
        match dropout.as_mut() {
            Some((rate, rng)) => tape.dropout(h, *rate, &mut **rng),
            None => Ok(h),
        }
    };
    let hs = input(tape)?;
    let s = pointer_nodes(tape, hs, vars.start)?;
    let he = input(tape)?;
    let e = pointer_nodes(tape, he, vars.end)?;
    let (m, attention) = match vars.two_dp {
        Some(v) => {
            let hm = input(tape)?;
            let (m, a) = twodp_nodes(tape, hm, v)?;
            (Some(m), Some(a))
        }
        None => (None, None),
    };
    Ok(HeadNodes { s, e, m, attention })
}

fn check_dim(enc: &EncodedSeq, d: usize) -> Result<()> {
    if enc.dim() != d {
        return Err(Error::shape("head input", (enc.len(), enc.dim()), (enc.len(), d)));
    }
    Ok(())
}

/// One pointer head: `(p_h + p_c) / 2` per position.
pub fn pointer_forward(enc: &EncodedSeq, params: &PointerParams) -> Result<Vec<f64>> {
    check_dim(enc, params.dim())?;
    let mut tape = Tape::new();
    let vars = PointerHeadVars::Interactive(params.bind(&mut tape));
    let h = tape.input(enc.h().clone());
    let s = pointer_nodes(&mut tape, h, vars)?;
    Ok(tape.value(s).data().to_vec())
}

/// The 2D head: mean of `m_sp`, `M_h`, `M_row` and `M_col`.
pub fn twodp_forward(enc: &EncodedSeq, params: &TwoDPParams) -> Result<Tensor2> {
    check_dim(enc, params.dim())?;
    let mut tape = Tape::new();
    let vars = TwoDPHeadVars::Interactive(params.bind(&mut tape));
    let h = tape.input(enc.h().clone());
    let (m, _) = twodp_nodes(&mut tape, h, vars)?;
    Ok(tape.value(m).clone())
}

/// Inference-mode evaluation of every active head.
pub fn forward(enc: &EncodedSeq, heads: &Heads, ablation: Ablation) -> Result<HeadOutputs> {
    heads.check(ablation, enc.dim())?;
    let mut tape = Tape::new();
    let vars = heads.bind(&mut tape);
    let h = tape.input(enc.h().clone());
    let nodes = heads_on_tape::<rand_chacha::ChaCha8Rng>(&mut tape, h, &vars, None)?;
    Ok(HeadOutputs {
        s: tape.value(nodes.s).data().to_vec(),
        e: tape.value(nodes.e).data().to_vec(),
        m: nodes.m.map(|m| tape.value(m).clone()),
        attention: nodes.attention.map(|a| tape.value(a).clone()),
    })
}
