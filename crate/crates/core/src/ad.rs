//! Program-to-program differentiation.
//!
//! [`reverse_grad`] keeps the forward statements untouched and appends the
//! adjoint sweep, visiting statements in reverse order:
//!
//! | forward          | adjoint contributions                       |
//! |------------------|---------------------------------------------|
//! | `c = a + b`      | `ā += c̄`, `b̄ += c̄`                          |
//! | `c = a - b`      | `ā += c̄`, `b̄ -= c̄`                          |
//! | `c = a * b`      | `ā += c̄·b`, `b̄ += c̄·a`                      |
//! | `c = a / b`      | `r = 1/b`, `ā += c̄·r`, `b̄ -= c̄·r·c`         |
//! | `c = -a`         | `ā -= c̄`                                    |
//! | `c = log a`      | `ā += c̄ / a`                                |
//! | `c = exp a`      | `ā += c̄·c`                                  |
//!
//! The first contribution to an accumulator initializes it; later ones are
//! merged with one `add` (or `sub`). Contributions to constants are never
//! emitted. [`forward_derivative`] propagates one tangent through the
//! program instead and is used to cross-check the reverse sweep.

use thiserror::Error;

use crate::ir::{Args, IrError, Op, Operand, Program};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("reverse mode needs a single scalar output, program has {0}")]
    NotScalar(usize),
    #[error("parameter index {wrt} out of range (program has {n_params})")]
    ParamOutOfRange { wrt: usize, n_params: usize },
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// A program whose outputs are `[f, ∂f/∂p0, …, ∂f/∂p(n-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProgram {
    program: Program,
}

impl GradientProgram {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn into_program(self) -> Program {
        self.program
    }

    pub fn n_params(&self) -> usize {
        self.program.n_params
    }

    /// Applies a program-level rewrite that preserves the output layout.
    pub fn map_program(self, f: impl FnOnce(Program) -> Result<Program, IrError>) -> Result<Self, IrError> {
        Ok(GradientProgram { program: f(self.program)? })
    }

    /// Value and gradient at `params`.
    pub fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>), IrError> {
        let out = self.program.interpret(params)?;
        Ok((out[0], out[1..].to_vec()))
    }
}

/// Emits statements while applying the two exact simplifications the
/// adjoint rules need: multiplying by a literal 1 and dividing 1 by it.
struct Emitter {
    program: Program,
}

impl Emitter {
    fn mul(&mut self, a: Operand, b: Operand) -> Operand {
        match (a, b) {
            (Operand::Const(c), x) | (x, Operand::Const(c)) if c == 1.0 => x,
            _ => self.program.push_binary(Op::Mul, a, b),
        }
    }

    fn div(&mut self, a: Operand, b: Operand) -> Operand {
        match b {
            Operand::Const(c) if c == 1.0 => a,
            _ => self.program.push_binary(Op::Div, a, b),
        }
    }

    fn add(&mut self, a: Operand, b: Operand) -> Operand {
        self.program.push_binary(Op::Add, a, b)
    }

    fn sub(&mut self, a: Operand, b: Operand) -> Operand {
        self.program.push_binary(Op::Sub, a, b)
    }

    fn neg(&mut self, a: Operand) -> Operand {
        match a {
            Operand::Const(c) => Operand::Const(-c),
            _ => self.program.push_unary(Op::Neg, a),
        }
    }
}

struct Adjoints {
    temps: Vec<Option<Operand>>,
    params: Vec<Option<Operand>>,
}

impl Adjoints {
    fn slot(&mut self, target: Operand) -> Option<&mut Option<Operand>> {
        match target {
            Operand::Temp(t) => Some(&mut self.temps[t]),
            Operand::Param(p) => Some(&mut self.params[p]),
            Operand::Const(_) => None,
        }
    }

    fn needs(&self, target: Operand) -> bool {
        !target.is_const()
    }

    /// `adj(target) += contribution`
    fn accumulate(&mut self, em: &mut Emitter, target: Operand, contribution: Operand) {
        if let Some(slot) = self.slot(target) {
            *slot = Some(match *slot {
                None => contribution,
                Some(acc) => em.add(acc, contribution),
            });
        }
    }

    /// `adj(target) -= contribution`
    fn accumulate_neg(&mut self, em: &mut Emitter, target: Operand, contribution: Operand) {
        if let Some(slot) = self.slot(target) {
            *slot = Some(match *slot {
                None => em.neg(contribution),
                Some(acc) => em.sub(acc, contribution),
            });
        }
    }
}

/// Reverse-mode gradient of a single-output program.
pub fn reverse_grad(program: &Program) -> Result<GradientProgram, AdError> {
    program.validate()?;
    if program.outputs.len() != 1 {
        return Err(AdError::NotScalar(program.outputs.len()));
    }
    let n_forward = program.statements.len();
    let mut em = Emitter { program: program.clone() };
    let mut adj = Adjoints { temps: vec![None; n_forward], params: vec![None; program.n_params] };

    let output = program.outputs[0];
    if let Some(slot) = adj.slot(output) {
        *slot = Some(Operand::Const(1.0));
    }

    for s in program.statements.iter().rev() {
        let Some(g) = adj.temps[s.dest] else { continue };
        let this = Operand::Temp(s.dest);
        match (s.op, s.args) {
            (Op::Add, Args::Binary(a, b)) => {
                adj.accumulate(&mut em, a, g);
                adj.accumulate(&mut em, b, g);
            }
            (Op::Sub, Args::Binary(a, b)) => {
                adj.accumulate(&mut em, a, g);
                adj.accumulate_neg(&mut em, b, g);
            }
            (Op::Mul, Args::Binary(a, b)) => {
                if adj.needs(a) {
                    let c = em.mul(g, b);
                    adj.accumulate(&mut em, a, c);
                }
                if adj.needs(b) {
                    let c = em.mul(g, a);
                    adj.accumulate(&mut em, b, c);
                }
            }
            (Op::Div, Args::Binary(a, b)) => {
                if adj.needs(a) || adj.needs(b) {
                    let r = em.div(Operand::Const(1.0), b);
                    let ga = em.mul(g, r);
                    adj.accumulate(&mut em, a, ga);
                    if adj.needs(b) {
                        let gb = em.mul(ga, this);
                        adj.accumulate_neg(&mut em, b, gb);
                    }
                }
            }
            (Op::Neg, Args::Unary(a)) => adj.accumulate_neg(&mut em, a, g),
            (Op::Log, Args::Unary(a)) => {
                if adj.needs(a) {
                    let c = em.div(g, a);
                    adj.accumulate(&mut em, a, c);
                }
            }
            (Op::Exp, Args::Unary(a)) => {
                if adj.needs(a) {
                    let c = em.mul(g, this);
                    adj.accumulate(&mut em, a, c);
                }
            }
            _ => unreachable!("validated arity"),
        }
    }

    let mut out = em.program;
    out.outputs = std::iter::once(output)
        .chain(adj.params.iter().map(|a| a.unwrap_or(Operand::Const(0.0))))
        .collect();
    Ok(GradientProgram { program: out.eliminate_dead_code() })
}

/// Forward-mode derivative with respect to one parameter; outputs
/// `[f, ∂f/∂p_wrt]`.
pub fn forward_derivative(program: &Program, wrt: usize) -> Result<Program, AdError> {
    program.validate()?;
    if program.outputs.len() != 1 {
        return Err(AdError::NotScalar(program.outputs.len()));
    }
    if wrt >= program.n_params {
        return Err(AdError::ParamOutOfRange { wrt, n_params: program.n_params });
    }
    let mut em = Emitter { program: Program::new(program.n_params) };
    // tangent of every forward temp; None is an exact zero
    let mut tangent: Vec<Option<Operand>> = Vec::with_capacity(program.statements.len());
    let mut primal: Vec<Operand> = Vec::with_capacity(program.statements.len());

    let tan = |tangent: &[Option<Operand>], o: Operand| match o {
        Operand::Temp(t) => tangent[t],
        Operand::Param(p) if p == wrt => Some(Operand::Const(1.0)),
        _ => None,
    };

    for s in &program.statements {
        let args = match s.args {
            Args::Unary(a) => Args::Unary(remap(&primal, a)),
            Args::Binary(a, b) => Args::Binary(remap(&primal, a), remap(&primal, b)),
        };
        let this = em.program.push(s.op, args);
        primal.push(this);

        let t = match (s.op, s.args, args) {
            (Op::Add, Args::Binary(a0, b0), _) => match (tan(&tangent, a0), tan(&tangent, b0)) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x),
                (Some(x), Some(y)) => Some(em.add(x, y)),
            },
            (Op::Sub, Args::Binary(a0, b0), _) => match (tan(&tangent, a0), tan(&tangent, b0)) {
                (None, None) => None,
                (Some(x), None) => Some(x),
                (None, Some(y)) => Some(em.neg(y)),
                (Some(x), Some(y)) => Some(em.sub(x, y)),
            },
            (Op::Mul, Args::Binary(a0, b0), Args::Binary(a, b)) => {
                let left = tan(&tangent, a0).map(|ta| em.mul(ta, b));
                let right = tan(&tangent, b0).map(|tb| em.mul(a, tb));
                match (left, right) {
                    (None, None) => None,
                    (Some(x), None) | (None, Some(x)) => Some(x),
                    (Some(x), Some(y)) => Some(em.add(x, y)),
                }
            }
            (Op::Div, Args::Binary(a0, b0), Args::Binary(_, b)) => {
                let ta = tan(&tangent, a0);
                let tb = tan(&tangent, b0).map(|tb| em.mul(this, tb));
                let num = match (ta, tb) {
                    (None, None) => None,
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => Some(em.neg(y)),
                    (Some(x), Some(y)) => Some(em.sub(x, y)),
                };
                num.map(|n| em.div(n, b))
            }
            (Op::Neg, Args::Unary(a0), _) => tan(&tangent, a0).map(|x| em.neg(x)),
            (Op::Log, Args::Unary(a0), Args::Unary(a)) => tan(&tangent, a0).map(|x| em.div(x, a)),
            (Op::Exp, Args::Unary(a0), _) => tan(&tangent, a0).map(|x| em.mul(x, this)),
            _ => unreachable!("validated arity"),
        };
        tangent.push(t);
    }

    let output = program.outputs[0];
    let mut out = em.program;
    out.outputs = vec![remap(&primal, output), tan(&tangent, output).unwrap_or(Operand::Const(0.0))];
    Ok(out.eliminate_dead_code())
}

fn remap(primal: &[Operand], o: Operand) -> Operand {
    match o {
        Operand::Temp(t) => primal[t],
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Operand::{Const, Param, Temp};

    fn product() -> Program {
        let mut p = Program::new(2);
        let t = p.push_binary(Op::Mul, Param(0), Param(1));
        p.outputs = vec![t];
        p
    }

    #[test]
    fn product_rule() {
        let g = reverse_grad(&product()).unwrap();
        assert_eq!(g.program().interpret(&[2.0, 3.0]).unwrap(), vec![6.0, 3.0, 2.0]);
        let f = forward_derivative(&product(), 0).unwrap();
        assert_eq!(f.interpret(&[2.0, 3.0]).unwrap(), vec![6.0, 3.0]);
    }

    #[test]
    fn log_rule() {
        let mut p = Program::new(1);
        let t = p.push_unary(Op::Log, Param(0));
        p.outputs = vec![t];
        let out = reverse_grad(&p).unwrap().program().interpret(&[2.0]).unwrap();
        assert_eq!(out, vec![2f64.ln(), 0.5]);
    }

    #[test]
    fn constant_program_has_zero_gradient() {
        let mut p = Program::new(3);
        let t = p.push_unary(Op::Exp, Const(1.0));
        p.outputs = vec![t];
        let g = reverse_grad(&p).unwrap();
        assert_eq!(g.program().interpret(&[0.1, 0.2, 0.3]).unwrap(), vec![1f64.exp(), 0.0, 0.0, 0.0]);
        let f = forward_derivative(&p, 2).unwrap();
        assert_eq!(f.interpret(&[0.1, 0.2, 0.3]).unwrap()[1], 0.0);
    }

    #[test]
    fn output_may_be_a_parameter() {
        let mut p = Program::new(2);
        p.outputs = vec![Param(1)];
        let g = reverse_grad(&p).unwrap();
        assert_eq!(g.program().interpret(&[5.0, 7.0]).unwrap(), vec![7.0, 0.0, 1.0]);
    }

    #[test]
    fn errors() {
        let mut two = product();
        two.outputs.push(Temp(0));
        assert_eq!(reverse_grad(&two), Err(AdError::NotScalar(2)));
        assert_eq!(forward_derivative(&product(), 2), Err(AdError::ParamOutOfRange { wrt: 2, n_params: 2 }));
    }

    #[test]
    fn every_rule_matches_forward_mode() {
        // f = exp(p0 / p1) - log(p0 * p1) + -(p1 - p0) / 3
        let mut p = Program::new(2);
        let q = p.push_binary(Op::Div, Param(0), Param(1));
        let e = p.push_unary(Op::Exp, q);
        let m = p.push_binary(Op::Mul, Param(0), Param(1));
        let l = p.push_unary(Op::Log, m);
        let d = p.push_binary(Op::Sub, e, l);
        let s = p.push_binary(Op::Sub, Param(1), Param(0));
        let n = p.push_unary(Op::Neg, s);
        let n3 = p.push_binary(Op::Div, n, Const(3.0));
        let f = p.push_binary(Op::Add, d, n3);
        p.outputs = vec![f];

        let x = [0.8, 1.7];
        let (val, grad) = reverse_grad(&p).unwrap().evaluate(&x).unwrap();
        assert_eq!(val, p.interpret(&x).unwrap()[0]);
        // analytic: d/dp0 = exp(q)/p1 - 1/p0 + 1/3 ; d/dp1 = -exp(q) p0/p1^2 - 1/p1 - 1/3
        let qv = x[0] / x[1];
        let expect = [qv.exp() / x[1] - 1.0 / x[0] + 1.0 / 3.0, -qv.exp() * x[0] / (x[1] * x[1]) - 1.0 / x[1] - 1.0 / 3.0];
        for i in 0..2 {
            let fwd = forward_derivative(&p, i).unwrap().interpret(&x).unwrap()[1];
            assert!((grad[i] - expect[i]).abs() <= 1e-14 * expect[i].abs().max(1.0));
            assert!((fwd - grad[i]).abs() <= 1e-14 * grad[i].abs().max(1.0));
        }
    }

    #[test]
    fn gradient_program_validates_and_keeps_forward_sweep() {
        let mut p = Program::new(1);
        let a = p.push_unary(Op::Exp, Param(0));
        let b = p.push_binary(Op::Mul, a, a);
        p.outputs = vec![b];
        let g = reverse_grad(&p).unwrap();
        assert!(g.program().validate().is_ok());
        assert_eq!(&g.program().statements[..2], &p.statements[..]);
        let (v, d) = g.evaluate(&[0.3]).unwrap();
        assert_eq!(v, (0.3f64).exp() * (0.3f64).exp());
        assert!((d[0] - 2.0 * (0.6f64).exp()).abs() < 1e-14);
    }
}
