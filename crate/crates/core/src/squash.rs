//! Lowering of a [`ModelGraph`] to a flat [`Program`].
//!
//! Nodes are visited in the graph's post-order and each one is lowered
//! exactly once, so a subgraph shared by several parents is shared in the
//! program as well. Vector nodes are unrolled into one scalar statement per
//! lane; `Sum` becomes a balanced tree of additions.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{GraphError, ModelGraph, NodeId, NodeKind, Shape};
use crate::ir::{Op, Operand, Program};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SquashError {
    #[error("root {0} is {1}; a likelihood root must be scalar")]
    VectorRoot(NodeId, Shape),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Lowers the scalar subexpression at `root`.
pub fn squash(graph: &ModelGraph, root: NodeId) -> Result<Program, SquashError> {
    graph.validate()?;
    let shape = graph.shape(root)?;
    if !shape.is_scalar() {
        return Err(SquashError::VectorRoot(root, shape));
    }

    let mut program = Program::new(graph.n_params());
    let mut lowered: Vec<Option<Vec<Operand>>> = vec![None; graph.len()];

    for id in graph.topo_order(root)? {
        let node = graph.node(id).expect("topo_order yields valid ids");
        let lanes = |c: usize| lowered[node.children[c].index()].as_deref().expect("child lowered first");
        let out: Vec<Operand> = match &node.kind {
            NodeKind::Param { index } => vec![Operand::Param(*index)],
            NodeKind::ParamVector { indices } => indices.iter().map(|&i| Operand::Param(i)).collect(),
            NodeKind::ConstScalar(v) => vec![Operand::Const(*v)],
            NodeKind::ConstVector(v) => v.iter().map(|&c| Operand::Const(c)).collect(),
            NodeKind::Neg | NodeKind::Log | NodeKind::Exp => {
                let op = unary_op(&node.kind);
                lanes(0).to_vec().into_iter().map(|a| program.push_unary(op, a)).collect()
            }
            NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div => {
                let op = binary_op(&node.kind);
                let (a, b) = (lanes(0).to_vec(), lanes(1).to_vec());
                (0..node.shape.len())
                    .map(|k| {
                        let x = if a.len() == 1 { a[0] } else { a[k] };
                        let y = if b.len() == 1 { b[0] } else { b[k] };
                        program.push_binary(op, x, y)
                    })
                    .collect()
            }
            NodeKind::Sum => {
                let terms = lanes(0).to_vec();
                vec![pairwise_sum(&mut program, terms)]
            }
        };
        lowered[id.index()] = Some(out);
    }

    let root_lanes = lowered[root.index()].take().expect("root lowered");
    program.outputs = root_lanes;
    Ok(program)
}

/// Adjacent pairs are added level by level; an odd element is carried up
/// unchanged. For three terms this is `(a + b) + c`.
fn pairwise_sum(program: &mut Program, mut terms: Vec<Operand>) -> Operand {
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        for pair in terms.chunks(2) {
            match *pair {
                [a, b] => next.push(program.push_binary(Op::Add, a, b)),
                [a] => next.push(a),
                _ => unreachable!(),
            }
        }
        terms = next;
    }
    terms[0]
}

fn unary_op(kind: &NodeKind) -> Op {
    match kind {
        NodeKind::Neg => Op::Neg,
        NodeKind::Log => Op::Log,
        NodeKind::Exp => Op::Exp,
        _ => unreachable!(),
    }
}

fn binary_op(kind: &NodeKind) -> Op {
    match kind {
        NodeKind::Add => Op::Add,
        NodeKind::Sub => Op::Sub,
        NodeKind::Mul => Op::Mul,
        NodeKind::Div => Op::Div,
        _ => unreachable!(),
    }
}

/// Function-like listing of a program, in the spirit of generated source:
/// a header naming the parameters, one line per statement and a return line.
pub fn emit_source(program: &Program, name: &str) -> String {
    let mut s = String::new();
    let params: Vec<String> = (0..program.n_params).map(|i| format!("p{i}")).collect();
    let _ = writeln!(s, "fn {name}({}) {{", params.join(", "));
    for st in &program.statements {
        let _ = writeln!(s, "    {st}");
    }
    let outs: Vec<String> = program.outputs.iter().map(|o| o.to_string()).collect();
    let _ = writeln!(s, "    return ({})", outs.join(", "));
    s.push_str("}\n");
    s
}

/// Lines [`emit_source`] adds around the statements.
pub const EMIT_OVERHEAD_LINES: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Value;

    #[test]
    fn add_param_const() {
        let mut g = ModelGraph::new();
        let i = g.declare_param("x", 0.0);
        let p = g.param(i).unwrap();
        let c = g.constant(2.0).unwrap();
        let root = g.add(p, c).unwrap();
        let prog = squash(&g, root).unwrap();
        assert_eq!(prog.len(), 1);
        assert_eq!(prog.interpret(&[1.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn sum_of_const_vector_is_an_add_chain() {
        let mut g = ModelGraph::new();
        let v = g.const_vector(vec![1.0, 2.0, 3.0]).unwrap();
        let root = g.sum(v).unwrap();
        let prog = squash(&g, root).unwrap();
        assert_eq!(prog.to_string(), "t0 = add 1.0 2.0\nt1 = add t0 3.0\nout t1\n");
        assert_eq!(prog.interpret(&[]).unwrap(), vec![6.0]);
    }

    #[test]
    fn vector_root_rejected() {
        let mut g = ModelGraph::new();
        let v = g.const_vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(squash(&g, v), Err(SquashError::VectorRoot(..))));
    }

    #[test]
    fn malformed_graph_rejected() {
        let mut g = ModelGraph::new();
        g.declare_param("unused", 0.0);
        let c = g.constant(1.0).unwrap();
        assert!(matches!(squash(&g, c), Err(SquashError::Graph(GraphError::UnreferencedParam { .. }))));
    }

    #[test]
    fn shared_node_lowered_once() {
        let mut g = ModelGraph::new();
        let i = g.declare_param("x", 0.0);
        let p = g.param(i).unwrap();
        let e = g.exp(p).unwrap();
        let l = g.log(e).unwrap();
        let root = g.mul(e, l).unwrap();
        let prog = squash(&g, root).unwrap();
        // exp, log, mul
        assert_eq!(prog.len(), 3);
        let x = 0.7f64;
        assert_eq!(prog.interpret(&[x]).unwrap()[0], g.eval(root, &[x]).unwrap().as_scalar().unwrap());
    }

    #[test]
    fn broadcast_unrolls_per_lane() {
        let mut g = ModelGraph::new();
        let a = g.declare_param("a", 0.0);
        let b = g.declare_param("b", 0.0);
        let pa = g.param(a).unwrap();
        let pv = g.param_vector(vec![a, b]).unwrap();
        let c = g.const_vector(vec![2.0, 4.0]).unwrap();
        let m = g.mul(pv, c).unwrap(); // 2
        let d = g.sub(pa, m).unwrap(); // 2, scalar on the left
        let root = g.sum(d).unwrap(); // 1
        let prog = squash(&g, root).unwrap();
        assert_eq!(prog.len(), 5);
        let x = [1.5, -0.25];
        let expect = g.eval(root, &x).unwrap();
        assert_eq!(Value::Scalar(prog.interpret(&x).unwrap()[0]), expect);
    }

    #[test]
    fn emit_source_shape() {
        let mut p = Program::new(1);
        let t = p.push_binary(Op::Add, Operand::Param(0), Operand::Const(1.0));
        p.outputs = vec![t];
        let text = emit_source(&p, "f");
        assert_eq!(text, "fn f(p0) {\n    t0 = add p0 1.0\n    return (t0)\n}\n");
        assert_eq!(text.lines().filter(|l| l.contains(" = ")).count(), 1);
        assert_eq!(text, emit_source(&p.clone(), "f"));
        assert_eq!(text.lines().count(), p.len() + EMIT_OVERHEAD_LINES);
    }
}
