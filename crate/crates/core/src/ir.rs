//! Straight-line single-assignment programs.
//!
//! A [`Program`] is a list of scalar statements `t_k = op a b` where `k` is
//! the statement's position, followed by a list of output operands. The
//! same representation is used for objectives and for the gradient
//! programs produced by [`crate::ad`], so the interpreter and the
//! optimization passes here serve both.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operand {
    Temp(usize),
    Param(usize),
    Const(f64),
}

impl Operand {
    pub fn is_const(self) -> bool {
        matches!(self, Operand::Const(_))
    }

    fn key(self) -> OperandKey {
        match self {
            Operand::Temp(t) => OperandKey::Temp(t),
            Operand::Param(p) => OperandKey::Param(p),
            Operand::Const(c) => OperandKey::Const(c.to_bits()),
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Temp(t) => write!(f, "t{t}"),
            Operand::Param(p) => write!(f, "p{p}"),
            Operand::Const(c) => write!(f, "{c:?}"),
        }
    }
}

/// Bit-exact, totally ordered stand-in for an operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum OperandKey {
    Const(u64),
    Param(usize),
    Temp(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Log,
    Exp,
}

impl Op {
    pub const ALL: [Op; 7] = [Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Neg, Op::Log, Op::Exp];

    pub fn arity(self) -> usize {
        match self {
            Op::Neg | Op::Log | Op::Exp => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Log => "log",
            Op::Exp => "exp",
        }
    }

    fn is_commutative(self) -> bool {
        matches!(self, Op::Add | Op::Mul)
    }

    /// Applies the operation, rejecting log of a non-positive argument,
    /// division by zero and any other non-finite result.
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> Option<f64> {
        let v = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => {
                if b == 0.0 {
                    return None;
                }
                a / b
            }
            Op::Neg => -a,
            Op::Log => {
                if !(a > 0.0) {
                    return None;
                }
                a.ln()
            }
            Op::Exp => a.exp(),
        };
        v.is_finite().then_some(v)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Args {
    Unary(Operand),
    Binary(Operand, Operand),
}

impl Args {
    pub fn len(&self) -> usize {
        match self {
            Args::Unary(_) => 1,
            Args::Binary(..) => 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn operands(&self) -> impl Iterator<Item = Operand> {
        let (a, b) = match *self {
            Args::Unary(a) => (a, None),
            Args::Binary(a, b) => (a, Some(b)),
        };
        std::iter::once(a).chain(b)
    }

    fn map(self, mut f: impl FnMut(Operand) -> Operand) -> Args {
        match self {
            Args::Unary(a) => Args::Unary(f(a)),
            Args::Binary(a, b) => Args::Binary(f(a), f(b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub dest: usize,
    pub op: Op,
    pub args: Args,
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{} = {}", self.dest, self.op)?;
        for a in self.args.operands() {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub n_params: usize,
    pub statements: Vec<Statement>,
    pub outputs: Vec<Operand>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DestMismatch { position: usize, dest: usize },
    Arity { position: usize, op: Op, got: usize },
    UseBeforeDefine { position: usize, temp: usize },
    ParamOutOfRange { position: usize, param: usize },
    OutputUndefined { output: usize, temp: usize },
    OutputParamOutOfRange { output: usize, param: usize },
    NoOutputs,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DestMismatch { position, dest } => {
                write!(f, "statement {position} assigns t{dest}")
            }
            Violation::Arity { position, op, got } => {
                write!(f, "statement {position}: {op} takes {} operands, got {got}", op.arity())
            }
            Violation::UseBeforeDefine { position, temp } => {
                write!(f, "statement {position} uses t{temp} before it is defined")
            }
            Violation::ParamOutOfRange { position, param } => {
                write!(f, "statement {position} uses undeclared p{param}")
            }
            Violation::OutputUndefined { output, temp } => {
                write!(f, "output {output} refers to undefined t{temp}")
            }
            Violation::OutputParamOutOfRange { output, param } => {
                write!(f, "output {output} refers to undeclared p{param}")
            }
            Violation::NoOutputs => f.write_str("program has no outputs"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("invalid program: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("expected {expected} parameter values, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("numerical domain error in statement {statement} ({op})")]
    Domain { statement: usize, op: Op },
}

impl Program {
    pub fn new(n_params: usize) -> Self {
        Program { n_params, statements: Vec::new(), outputs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    /// Appends `t_k = op args` and returns `Temp(k)`.
    pub fn push(&mut self, op: Op, args: Args) -> Operand {
        let dest = self.statements.len();
        self.statements.push(Statement { dest, op, args });
        Operand::Temp(dest)
    }

    pub fn push_binary(&mut self, op: Op, a: Operand, b: Operand) -> Operand {
        self.push(op, Args::Binary(a, b))
    }

    pub fn push_unary(&mut self, op: Op, a: Operand) -> Operand {
        self.push(op, Args::Unary(a))
    }

    /// Every structural violation in the program; empty means valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (position, s) in self.statements.iter().enumerate() {
            if s.dest != position {
                out.push(Violation::DestMismatch { position, dest: s.dest });
            }
            if s.args.len() != s.op.arity() {
                out.push(Violation::Arity { position, op: s.op, got: s.args.len() });
            }
            for a in s.args.operands() {
                match a {
                    Operand::Temp(t) if t >= position => {
                        out.push(Violation::UseBeforeDefine { position, temp: t })
                    }
                    Operand::Param(p) if p >= self.n_params => {
                        out.push(Violation::ParamOutOfRange { position, param: p })
                    }
                    _ => {}
                }
            }
        }
        if self.outputs.is_empty() {
            out.push(Violation::NoOutputs);
        }
        for (output, o) in self.outputs.iter().enumerate() {
            match *o {
                Operand::Temp(t) if t >= self.statements.len() => {
                    out.push(Violation::OutputUndefined { output, temp: t })
                }
                Operand::Param(p) if p >= self.n_params => {
                    out.push(Violation::OutputParamOutOfRange { output, param: p })
                }
                _ => {}
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), IrError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(IrError::Invalid(v))
        }
    }

    /// Runs the program and returns its outputs.
    pub fn interpret(&self, params: &[f64]) -> Result<Vec<f64>, IrError> {
        let mut temps = Vec::new();
        let mut out = vec![0.0; self.outputs.len()];
        self.interpret_into(params, &mut temps, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`Program::interpret`]: `temps` is scratch
    /// space, `out` receives one value per output.
    ///
    /// The program must be valid; operands are not range-checked here beyond
    /// the slice indexing itself.
    pub fn interpret_into(&self, params: &[f64], temps: &mut Vec<f64>, out: &mut [f64]) -> Result<(), IrError> {
        if params.len() != self.n_params {
            return Err(IrError::ParamCount { expected: self.n_params, got: params.len() });
        }
        assert_eq!(out.len(), self.outputs.len(), "output buffer length");
        temps.clear();
        temps.reserve(self.statements.len());

        #[inline(always)]
        fn load(o: Operand, temps: &[f64], params: &[f64]) -> f64 {
            match o {
                Operand::Temp(t) => temps[t],
                Operand::Param(p) => params[p],
                Operand::Const(c) => c,
            }
        }

        for (i, s) in self.statements.iter().enumerate() {
            let (a, b) = match s.args {
                Args::Unary(a) => (load(a, temps, params), 0.0),
                Args::Binary(a, b) => (load(a, temps, params), load(b, temps, params)),
            };
            match s.op.apply(a, b) {
                Some(v) => temps.push(v),
                None => return Err(IrError::Domain { statement: i, op: s.op }),
            }
        }
        for (slot, &o) in out.iter_mut().zip(&self.outputs) {
            *slot = load(o, temps, params);
        }
        Ok(())
    }

    /// Evaluates statements whose operands are all constants at transform
    /// time and substitutes the results into later uses.
    pub fn fold_constants(&self) -> Result<Program, IrError> {
        self.validate()?;
        let mut out = Program::new(self.n_params);
        let mut map: Vec<Operand> = Vec::with_capacity(self.statements.len());
        let remap = |map: &[Operand], o: Operand| match o {
            Operand::Temp(t) => map[t],
            other => other,
        };
        for (i, s) in self.statements.iter().enumerate() {
            let args = s.args.map(|o| remap(&map, o));
            if args.operands().all(Operand::is_const) {
                let mut vals = args.operands().map(|o| match o {
                    Operand::Const(c) => c,
                    _ => unreachable!(),
                });
                let a = vals.next().unwrap_or(0.0);
                let b = vals.next().unwrap_or(0.0);
                let v = s.op.apply(a, b).ok_or(IrError::Domain { statement: i, op: s.op })?;
                map.push(Operand::Const(v));
            } else {
                map.push(out.push(s.op, args));
            }
        }
        out.outputs = self.outputs.iter().map(|&o| remap(&map, o)).collect();
        Ok(out)
    }

    /// Merges structurally identical statements. Operands of `add` and `mul`
    /// are put in a canonical order before comparison; nothing else is
    /// reassociated.
    pub fn eliminate_common_subexpressions(&self) -> Program {
        let mut out = Program::new(self.n_params);
        let mut map: Vec<Operand> = Vec::with_capacity(self.statements.len());
        let mut seen: HashMap<(Op, OperandKey, Option<OperandKey>), Operand> = HashMap::new();
        for s in &self.statements {
            let args = s.args.map(|o| match o {
                Operand::Temp(t) => map[t],
                other => other,
            });
            let key = match args {
                Args::Unary(a) => (s.op, a.key(), None),
                Args::Binary(a, b) => {
                    let (ka, kb) = (a.key(), b.key());
                    if s.op.is_commutative() && kb < ka {
                        (s.op, kb, Some(ka))
                    } else {
                        (s.op, ka, Some(kb))
                    }
                }
            };
            let target = *seen.entry(key).or_insert_with(|| out.push(s.op, args));
            map.push(target);
        }
        out.outputs = self
            .outputs
            .iter()
            .map(|&o| match o {
                Operand::Temp(t) => map[t],
                other => other,
            })
            .collect();
        out
    }

    /// Drops statements that no output depends on and renumbers the rest.
    pub fn eliminate_dead_code(&self) -> Program {
        let n = self.statements.len();
        let mut live = vec![false; n];
        for o in &self.outputs {
            if let Operand::Temp(t) = *o {
                live[t] = true;
            }
        }
        for i in (0..n).rev() {
            if live[i] {
                for a in self.statements[i].args.operands() {
                    if let Operand::Temp(t) = a {
                        live[t] = true;
                    }
                }
            }
        }
        let mut out = Program::new(self.n_params);
        let mut map = vec![usize::MAX; n];
        let remap = |map: &[usize], o: Operand| match o {
            Operand::Temp(t) => Operand::Temp(map[t]),
            other => other,
        };
        for (i, s) in self.statements.iter().enumerate() {
            if live[i] {
                let args = s.args.map(|o| remap(&map, o));
                if let Operand::Temp(t) = out.push(s.op, args) {
                    map[i] = t;
                }
            }
        }
        out.outputs = self.outputs.iter().map(|&o| remap(&map, o)).collect();
        out
    }

    /// fold, CSE, then DCE.
    pub fn optimize(&self) -> Result<Program, IrError> {
        Ok(self.fold_constants()?.eliminate_common_subexpressions().eliminate_dead_code())
    }

    pub fn stats(&self) -> ProgramStats {
        let mut per_op = [0usize; 7];
        for s in &self.statements {
            per_op[s.op.index()] += 1;
        }
        ProgramStats { n_statements: self.statements.len(), n_outputs: self.outputs.len(), per_op }
    }
}

/// `t3 = mul t1 p0`, one statement per line, then an `out` line.
impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.statements {
            writeln!(f, "{s}")?;
        }
        f.write_str("out")?;
        for o in &self.outputs {
            write!(f, " {o}")?;
        }
        writeln!(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramStats {
    pub n_statements: usize,
    pub n_outputs: usize,
    per_op: [usize; 7],
}

impl ProgramStats {
    pub fn count(&self, op: Op) -> usize {
        self.per_op[op.index()]
    }
}

impl fmt::Display for ProgramStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "statements: {}, outputs: {}", self.n_statements, self.n_outputs)?;
        for op in Op::ALL {
            let c = self.count(op);
            if c > 0 {
                write!(f, ", {op}: {c}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Operand::{Const, Param, Temp};

    fn prog(n_params: usize, stmts: &[(Op, Args)], outputs: Vec<Operand>) -> Program {
        let mut p = Program::new(n_params);
        for &(op, args) in stmts {
            p.push(op, args);
        }
        p.outputs = outputs;
        p
    }

    #[test]
    fn validate_examples() {
        let ok = prog(1, &[(Op::Add, Args::Binary(Param(0), Const(1.0)))], vec![Temp(0)]);
        assert!(ok.validate().is_ok());

        let bad = prog(
            1,
            &[(Op::Add, Args::Binary(Temp(1), Const(1.0))), (Op::Neg, Args::Unary(Param(0)))],
            vec![Temp(1)],
        );
        assert_eq!(bad.violations(), vec![Violation::UseBeforeDefine { position: 0, temp: 1 }]);

        let no_out = prog(1, &[(Op::Neg, Args::Unary(Param(0)))], vec![]);
        assert_eq!(no_out.violations(), vec![Violation::NoOutputs]);
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut p = prog(1, &[(Op::Log, Args::Binary(Param(3), Temp(0)))], vec![Temp(4), Param(2)]);
        p.statements[0].dest = 9;
        let v = p.violations();
        assert!(v.contains(&Violation::DestMismatch { position: 0, dest: 9 }));
        assert!(v.contains(&Violation::Arity { position: 0, op: Op::Log, got: 2 }));
        assert!(v.contains(&Violation::ParamOutOfRange { position: 0, param: 3 }));
        assert!(v.contains(&Violation::UseBeforeDefine { position: 0, temp: 0 }));
        assert!(v.contains(&Violation::OutputUndefined { output: 0, temp: 4 }));
        assert!(v.contains(&Violation::OutputParamOutOfRange { output: 1, param: 2 }));
    }

    #[test]
    fn interpret_examples() {
        let p = prog(2, &[(Op::Add, Args::Binary(Param(0), Param(1)))], vec![Temp(0)]);
        assert_eq!(p.interpret(&[1.0, 2.0]).unwrap(), vec![3.0]);
        let l = prog(0, &[(Op::Log, Args::Unary(Const(1.0)))], vec![Temp(0)]);
        assert_eq!(l.interpret(&[]).unwrap(), vec![0.0]);
        assert!(matches!(p.interpret(&[1.0]), Err(IrError::ParamCount { .. })));
    }

    #[test]
    fn interpret_domain_errors_carry_statement() {
        let p = prog(
            1,
            &[(Op::Neg, Args::Unary(Param(0))), (Op::Log, Args::Unary(Temp(0)))],
            vec![Temp(1)],
        );
        assert_eq!(p.interpret(&[2.0]), Err(IrError::Domain { statement: 1, op: Op::Log }));
        let d = prog(1, &[(Op::Div, Args::Binary(Const(1.0), Param(0)))], vec![Temp(0)]);
        assert_eq!(d.interpret(&[0.0]), Err(IrError::Domain { statement: 0, op: Op::Div }));
    }

    #[test]
    fn fold_constants_examples() {
        let p = prog(
            1,
            &[(Op::Mul, Args::Binary(Const(2.0), Const(3.0))), (Op::Add, Args::Binary(Temp(0), Param(0)))],
            vec![Temp(1)],
        );
        let f = p.fold_constants().unwrap();
        assert_eq!(f.statements, vec![Statement { dest: 0, op: Op::Add, args: Args::Binary(Const(6.0), Param(0)) }]);
        assert_eq!(f.outputs, vec![Temp(0)]);

        let unchanged = prog(1, &[(Op::Exp, Args::Unary(Param(0)))], vec![Temp(0)]);
        assert_eq!(unchanged.fold_constants().unwrap(), unchanged);

        let bad = prog(0, &[(Op::Log, Args::Unary(Const(0.0)))], vec![Temp(0)]);
        assert_eq!(bad.fold_constants(), Err(IrError::Domain { statement: 0, op: Op::Log }));
    }

    #[test]
    fn fold_constants_can_empty_the_program() {
        let p = prog(0, &[(Op::Exp, Args::Unary(Const(0.0)))], vec![Temp(0)]);
        let f = p.fold_constants().unwrap();
        assert!(f.is_empty());
        assert_eq!(f.outputs, vec![Const(1.0)]);
    }

    #[test]
    fn cse_examples() {
        let dup = prog(
            2,
            &[
                (Op::Mul, Args::Binary(Param(0), Param(1))),
                (Op::Mul, Args::Binary(Param(0), Param(1))),
                (Op::Add, Args::Binary(Temp(0), Temp(1))),
            ],
            vec![Temp(2)],
        );
        let c = dup.eliminate_common_subexpressions();
        assert_eq!(c.len(), 2);
        assert_eq!(c.statements[1].args, Args::Binary(Temp(0), Temp(0)));

        let comm = prog(
            2,
            &[
                (Op::Mul, Args::Binary(Param(0), Param(1))),
                (Op::Mul, Args::Binary(Param(1), Param(0))),
                (Op::Add, Args::Binary(Temp(0), Temp(1))),
            ],
            vec![Temp(2)],
        );
        assert_eq!(comm.eliminate_common_subexpressions().len(), 2);

        let distinct = prog(
            2,
            &[(Op::Sub, Args::Binary(Param(0), Param(1))), (Op::Sub, Args::Binary(Param(1), Param(0)))],
            vec![Temp(0), Temp(1)],
        );
        assert_eq!(distinct.eliminate_common_subexpressions(), distinct);
    }

    #[test]
    fn dce_examples() {
        let p = prog(
            1,
            &[(Op::Add, Args::Binary(Param(0), Const(1.0))), (Op::Mul, Args::Binary(Param(0), Const(2.0)))],
            vec![Temp(1)],
        );
        let d = p.eliminate_dead_code();
        assert_eq!(d.len(), 1);
        assert_eq!(d.outputs, vec![Temp(0)]);
        assert_eq!(d.interpret(&[3.0]).unwrap(), p.interpret(&[3.0]).unwrap());

        let all_live = prog(
            1,
            &[(Op::Add, Args::Binary(Param(0), Const(1.0))), (Op::Mul, Args::Binary(Param(0), Const(2.0)))],
            vec![Temp(0), Temp(1)],
        );
        assert_eq!(all_live.eliminate_dead_code(), all_live);

        let empty = prog(0, &[], vec![Const(4.0)]);
        assert_eq!(empty.eliminate_dead_code(), empty);
        assert!(empty.validate().is_ok());
    }

    #[test]
    fn stats_and_printing() {
        let p = prog(
            2,
            &[
                (Op::Add, Args::Binary(Param(0), Param(1))),
                (Op::Mul, Args::Binary(Temp(0), Param(0))),
                (Op::Add, Args::Binary(Temp(1), Const(0.5))),
            ],
            vec![Temp(2)],
        );
        let s = p.stats();
        assert_eq!((s.n_statements, s.count(Op::Add), s.count(Op::Mul), s.count(Op::Log)), (3, 2, 1, 0));
        assert_eq!(Program::new(0).stats().n_statements, 0);
        assert_eq!(p.to_string(), "t0 = add p0 p1\nt1 = mul t0 p0\nt2 = add t1 0.5\nout t2\n");
    }
}
