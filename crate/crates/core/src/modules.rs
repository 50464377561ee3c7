//! Differentiable module implementations and dynamic network assembly.
//!
//! Attention maps are flat `[G²]` vectors summing to one. The feature map is
//! a `[G², d_img]` matrix and text vectors are `[d_txt]`.

use dmn_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::answer::ANSWER_VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::layout::{ModuleKind, Output, SyntaxNode, SyntaxTree};

/// Floor added before renormalizing so an all-zero map stays finite.
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Tolerance on the unit-mass check of incoming attention maps.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleDims {
    pub cells: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_hidden: usize,
}

#[derive(Clone, Debug)]
struct Scorer {
    w_img: ParamId,
    w_txt: ParamId,
    w_pool: Option<ParamId>,
    u: ParamId,
}

#[derive(Clone, Debug)]
struct Head {
    w_in: ParamId,
    w_txt: Option<ParamId>,
    b_in: Option<ParamId>,
    w_out: ParamId,
    b_out: ParamId,
}

/// One parameter set per module kind; `is_present` reuses `exist`'s.
#[derive(Clone, Debug)]
pub struct NeuralModules {
    dims: ModuleDims,
    find: Scorer,
    filter: Scorer,
    relocate: Scorer,
    describe: Head,
    compare: Head,
    exist: Head,
    count: Head,
    greater_than: Head,
    less_than: Head,
    equal_to: Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleValue {
    Attention(Var),
    Prediction(Var),
}

impl ModuleValue {
    pub fn var(self) -> Var {
        match self {
            ModuleValue::Attention(v) | ModuleValue::Prediction(v) => v,
        }
    }
}

impl NeuralModules {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: ModuleDims, rng: &mut R) -> Result<Self> {
        let ModuleDims {
            cells: _,
            d_img,
            d_txt,
            d_hidden: h,
        } = dims;
        let n_ans = ANSWER_VOCAB_SIZE;
        let mut scorer = |name: &str, pooled: bool| -> Result<Scorer> {
            Ok(Scorer {
                w_img: store.glorot(format!("module.{name}.w_img"), d_img, h, rng)?,
                w_txt: store.glorot(format!("module.{name}.w_txt"), d_txt, h, rng)?,
                w_pool: if pooled {
                    Some(store.glorot(format!("module.{name}.w_pool"), d_img, h, rng)?)
                } else {
                    None
                },
                u: store.glorot_vector(format!("module.{name}.u"), h, rng)?,
            })
        };
        let find = scorer("find", false)?;
        let filter = scorer("filter", false)?;
        let relocate = scorer("relocate", true)?;
        let mut head = |name: &str, d_in: usize, text: bool| -> Result<Head> {
            Ok(Head {
                w_in: store.glorot(format!("module.{name}.w_in"), d_in, h, rng)?,
                w_txt: if text {
                    Some(store.glorot(format!("module.{name}.w_txt"), d_txt, h, rng)?)
                } else {
                    None
                },
                b_in: if text {
                    None
                } else {
                    Some(store.zeros(format!("module.{name}.b_in"), vec![h])?)
                },
                w_out: store.glorot(format!("module.{name}.w_out"), h, n_ans, rng)?,
                b_out: store.zeros(format!("module.{name}.b_out"), vec![n_ans])?,
            })
        };
        let unary = CARDINALITY_FEATURES;
        Ok(NeuralModules {
            dims,
            find,
            filter,
            relocate,
            describe: head("describe", d_img, true)?,
            compare: head("compare", 2 * d_img, true)?,
            exist: head("exist", unary, false)?,
            count: head("count", unary, false)?,
            greater_than: head("greater_than", 2 * unary, false)?,
            less_than: head("less_than", 2 * unary, false)?,
            equal_to: head("equal_to", 2 * unary, false)?,
        })
    }

    pub fn dims(&self) -> ModuleDims {
        self.dims
    }

    /// Evaluates one module. `x_img` is `[G², d_img]`, `c` is `[d_txt]`.
    pub fn apply(
        &self,
        tape: &mut Tape<'_>,
        kind: ModuleKind,
        inputs: &[Var],
        c: Var,
        x_img: Var,
    ) -> Result<ModuleValue> {
        let sig = kind.signature();
        if inputs.len() != sig.arity {
            return Err(Error::Module {
                kind: kind.to_string(),
                path: String::new(),
                message: format!("expected {} attention inputs, got {}", sig.arity, inputs.len()),
            });
        }
        for &t in inputs {
            check_attention(tape, t, self.dims.cells)
                .map_err(|message| Error::Invariant(format!("{kind} input: {message}")))?;
        }
        let out = match kind {
            ModuleKind::Find => self.scores(tape, &self.find, c, x_img, None)?,
            ModuleKind::Filter => {
                let s = self.scores(tape, &self.filter, c, x_img, None)?;
                let prod = tape.mul(inputs[0], s)?;
                normalize(tape, prod)?
            }
            ModuleKind::Relocate => {
                let pooled = tape.matmul(inputs[0], x_img)?;
                self.scores(tape, &self.relocate, c, x_img, Some(pooled))?
            }
            ModuleKind::And => {
                let m = tape.minimum(inputs[0], inputs[1])?;
                normalize(tape, m)?
            }
            ModuleKind::Or => {
                let m = tape.maximum(inputs[0], inputs[1])?;
                normalize(tape, m)?
            }
            ModuleKind::Describe => {
                let a = tape.matmul(inputs[0], x_img)?;
                self.head(tape, &self.describe, a, Some(c))?
            }
            ModuleKind::Compare => {
                let a1 = tape.matmul(inputs[0], x_img)?;
                let a2 = tape.matmul(inputs[1], x_img)?;
                let a = tape.concat(&[a1, a2])?;
                self.head(tape, &self.compare, a, Some(c))?
            }
            ModuleKind::Exist | ModuleKind::IsPresent | ModuleKind::Count => {
                let f = map_features(tape, inputs[0])?;
                let head = if kind == ModuleKind::Count {
                    &self.count
                } else {
                    &self.exist
                };
                self.head(tape, head, f, None)?
            }
            ModuleKind::GreaterThan | ModuleKind::LessThan | ModuleKind::EqualTo => {
                let f1 = map_features(tape, inputs[0])?;
                let f2 = map_features(tape, inputs[1])?;
                let f = tape.concat(&[f1, f2])?;
                let head = match kind {
                    ModuleKind::GreaterThan => &self.greater_than,
                    ModuleKind::LessThan => &self.less_than,
                    _ => &self.equal_to,
                };
                self.head(tape, head, f, None)?
            }
        };
        Ok(match sig.output {
            Output::Attention => ModuleValue::Attention(out),
            Output::Prediction => ModuleValue::Prediction(out),
        })
    }

    /// `softmax_cells(u · tanh(X W_img + c W_txt [+ a W_pool]))`.
    fn scores(
        &self,
        tape: &mut Tape<'_>,
        p: &Scorer,
        c: Var,
        x_img: Var,
        pooled: Option<Var>,
    ) -> Result<Var> {
        let s = self.raw_scores(tape, p, c, x_img, pooled)?;
        Ok(tape.softmax(s, 0)?)
    }

    fn raw_scores(
        &self,
        tape: &mut Tape<'_>,
        p: &Scorer,
        c: Var,
        x_img: Var,
        pooled: Option<Var>,
    ) -> Result<Var> {
        let w_img = tape.param(p.w_img);
        let w_txt = tape.param(p.w_txt);
        let u = tape.param(p.u);
        let img = tape.matmul(x_img, w_img)?;
        let mut shift = tape.matmul(c, w_txt)?;
        if let (Some(a), Some(w_pool)) = (pooled, p.w_pool) {
            let w_pool = tape.param(w_pool);
            let pa = tape.matmul(a, w_pool)?;
            shift = tape.add(shift, pa)?;
        }
        let pre = tape.add(img, shift)?;
        let hidden = tape.tanh(pre);
        Ok(tape.matmul(hidden, u)?)
    }

    /// `W_out · tanh(W_in x + W_txt c | b_in) + b_out`.
    fn head(&self, tape: &mut Tape<'_>, p: &Head, x: Var, c: Option<Var>) -> Result<Var> {
        let w_in = tape.param(p.w_in);
        let mut pre = tape.matmul(x, w_in)?;
        if let (Some(c), Some(w_txt)) = (c, p.w_txt) {
            let w_txt = tape.param(w_txt);
            let t = tape.matmul(c, w_txt)?;
            pre = tape.add(pre, t)?;
        }
        if let Some(b) = p.b_in {
            let b = tape.param(b);
            pre = tape.add(pre, b)?;
        }
        let hidden = tape.tanh(pre);
        let w_out = tape.param(p.w_out);
        let b_out = tape.param(p.b_out);
        let logits = tape.matmul(hidden, w_out)?;
        Ok(tape.add(logits, b_out)?)
    }
}

fn check_attention(tape: &Tape<'_>, t: Var, cells: usize) -> std::result::Result<(), String> {
    if tape.shape(t) != [cells] {
        return Err(format!("expected shape [{cells}], got {:?}", tape.shape(t)));
    }
    let v = tape.value(t);
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err("negative or non-finite entry".into());
    }
    let mass: f64 = v.iter().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(format!("total mass {mass}"));
    }
    Ok(())
}

/// `(x + ε) / Σ(x + ε)`, computed as a softmax of logs.
pub fn normalize(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let eps = tape.scalar(NORMALIZE_EPS);
    let shifted = tape.add(x, eps)?;
    let logs = tape.log(shifted);
    Ok(tape.softmax(logs, 0)?)
}

/// Mass levels, in units of `1/G²`, at which [`map_features`] counts cells.
/// All lie below the `G²/9` units a uniform map over nine cells assigns.
pub const COUNT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
/// Slope of the soft threshold, per `1/G²` unit of mass.
pub const COUNT_SHARPNESS: f64 = 16.0;
/// Length of [`map_features`].
pub const CARDINALITY_FEATURES: usize = COUNT_THRESHOLDS.len() + 3;

/// Permutation-invariant cardinality summary read by count-style heads:
/// soft counts `Σ σ(s(G²·t − c))` for each threshold `c` (scaled by 0.1),
/// then the Rényi entropies `-log Σt²`, `-log max t` and `H(t)`. The
/// entropies equal `ln k` for a map uniform over `k` cells.
pub fn map_features(tape: &mut Tape<'_>, t: Var) -> Result<Var> {
    let cells = tape.numel(t) as f64;
    let mut parts = Vec::with_capacity(CARDINALITY_FEATURES);
    for c in COUNT_THRESHOLDS {
        let z = tape.scale(t, COUNT_SHARPNESS * cells);
        let offset = tape.scalar(-COUNT_SHARPNESS * c);
        let z = tape.add(z, offset)?;
        let gate = tape.sigmoid(z);
        let n = tape.sum(gate);
        parts.push(tape.scale(n, 0.1));
    }
    let sq = tape.mul(t, t)?;
    let sum_sq = tape.sum(sq);
    let log_sq = tape.log(sum_sq);
    parts.push(tape.scale(log_sq, -1.0));
    let peak = tape.max(t);
    let log_peak = tape.log(peak);
    parts.push(tape.scale(log_peak, -1.0));
    let eps = tape.scalar(NORMALIZE_EPS);
    let shifted = tape.add(t, eps)?;
    let logs = tape.log(shifted);
    let plogp = tape.mul(t, logs)?;
    let neg_entropy = tape.sum(plogp);
    parts.push(tape.scale(neg_entropy, -1.0));
    Ok(tape.concat(&parts)?)
}

/// Result of running an assembled network.
#[derive(Clone, Debug)]
pub struct Execution {
    pub logits: Var,
    /// Post-order list of (postfix position, kind, output).
    pub nodes: Vec<(usize, ModuleKind, ModuleValue)>,
}

/// Evaluates `tree` bottom-up. `text_vectors[i]` is the text vector for the
/// token at postfix position `i`.
pub fn assemble_and_execute(
    modules: &NeuralModules,
    tape: &mut Tape<'_>,
    tree: &SyntaxTree,
    text_vectors: &[Var],
    x_img: Var,
) -> Result<Execution> {
    fn eval(
        modules: &NeuralModules,
        tape: &mut Tape<'_>,
        node: &SyntaxNode,
        path: &str,
        text_vectors: &[Var],
        x_img: Var,
        nodes: &mut Vec<(usize, ModuleKind, ModuleValue)>,
    ) -> Result<ModuleValue> {
        let mut inputs = Vec::with_capacity(node.children.len());
        for (i, child) in node.children.iter().enumerate() {
            let child_path = format!("{path}.{i}");
            match eval(modules, tape, child, &child_path, text_vectors, x_img, nodes)? {
                ModuleValue::Attention(v) => inputs.push(v),
                ModuleValue::Prediction(_) => {
                    return Err(Error::Module {
                        kind: node.token.kind.to_string(),
                        path: path.to_string(),
                        message: format!("child {i} is a prediction"),
                    })
                }
            }
        }
        let c = *text_vectors.get(node.position).ok_or_else(|| Error::Module {
            kind: node.token.kind.to_string(),
            path: path.to_string(),
            message: format!("no text vector for position {}", node.position),
        })?;
        let out = modules
            .apply(tape, node.token.kind, &inputs, c, x_img)
            .map_err(|e| match e {
                Error::Module { kind, message, .. } => Error::Module {
                    kind,
                    path: path.to_string(),
                    message,
                },
                Error::Invariant(message) => Error::Module {
                    kind: node.token.kind.to_string(),
                    path: path.to_string(),
                    message,
                },
                other => other,
            })?;
        nodes.push((node.position, node.token.kind, out));
        Ok(out)
    }

    let mut nodes = Vec::with_capacity(tree.len());
    match eval(modules, tape, &tree.root, "root", text_vectors, x_img, &mut nodes)? {
        ModuleValue::Prediction(logits) => Ok(Execution { logits, nodes }),
        ModuleValue::Attention(_) => Err(Error::Module {
            kind: tree.root.token.kind.to_string(),
            path: "root".into(),
            message: "root produced an attention map".into(),
        }),
    }
}
