//! Object-style model graphs.
//!
//! Nodes are appended to a table and may only reference nodes that already
//! exist, so every graph is acyclic by construction. Each node carries a
//! shape (scalar or fixed-length vector) that is resolved when it is added;
//! elementwise arithmetic broadcasts a scalar against a vector.

use std::fmt;

use thiserror::Error;

/// Dense handle into a [`ModelGraph`]'s node table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Param { index: usize },
    ParamVector { indices: Vec<usize> },
    ConstScalar(f64),
    ConstVector(Vec<f64>),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Log,
    Exp,
    Sum,
}

impl NodeKind {
    pub fn arity(&self) -> usize {
        match self {
            NodeKind::Param { .. }
            | NodeKind::ParamVector { .. }
            | NodeKind::ConstScalar(_)
            | NodeKind::ConstVector(_) => 0,
            NodeKind::Neg | NodeKind::Log | NodeKind::Exp | NodeKind::Sum => 1,
            NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Param { .. } => "Param",
            NodeKind::ParamVector { .. } => "ParamVector",
            NodeKind::ConstScalar(_) => "ConstScalar",
            NodeKind::ConstVector(_) => "ConstVector",
            NodeKind::Add => "Add",
            NodeKind::Sub => "Sub",
            NodeKind::Mul => "Mul",
            NodeKind::Div => "Div",
            NodeKind::Neg => "Neg",
            NodeKind::Log => "Log",
            NodeKind::Exp => "Exp",
            NodeKind::Sum => "Sum",
        }
    }

    fn is_elementwise_binary(&self) -> bool {
        matches!(self, NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
}

impl Shape {
    /// Number of scalar lanes: 1 for scalars.
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_scalar(self) -> bool {
        self == Shape::Scalar
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => f.write_str("scalar"),
            Shape::Vector(n) => write!(f, "vector[{n}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub initial: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{kind} takes {expected} children, got {got}")]
    Arity { kind: &'static str, expected: usize, got: usize },
    #[error("{kind}: incompatible operand shapes {left} and {right}")]
    ShapeMismatch { kind: &'static str, left: Shape, right: Shape },
    #[error("Sum expects a vector operand, got {0}")]
    SumOfScalar(Shape),
    #[error("child {child} out of range (graph has {len} nodes)")]
    ChildOutOfRange { child: NodeId, len: usize },
    #[error("parameter index {index} was never declared")]
    UnknownParam { index: usize },
    #[error("parameter {index} ({name}) is not referenced by any node")]
    UnreferencedParam { index: usize, name: String },
    #[error("{0} must be non-empty")]
    EmptyVector(&'static str),
    #[error("expected {expected} parameter values, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite value at node {node} ({kind})")]
    Domain { node: NodeId, kind: &'static str },
}

/// Append-only table of nodes plus the declared parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    params: Vec<ParamInfo>,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a scalar parameter and returns its index.
    pub fn declare_param(&mut self, name: impl Into<String>, initial: f64) -> usize {
        self.params.push(ParamInfo { name: name.into(), initial });
        self.params.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn initial_values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.initial).collect()
    }

    pub fn shape(&self, id: NodeId) -> Result<Shape, GraphError> {
        self.check_id(id).map(|n| n.shape)
    }

    fn check_id(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes
            .get(id.0)
            .ok_or(GraphError::ChildOutOfRange { child: id, len: self.nodes.len() })
    }

    /// Appends a node after checking arity, child ids, parameter indices and
    /// operand shapes.
    pub fn add_node(&mut self, kind: NodeKind, children: Vec<NodeId>) -> Result<NodeId, GraphError> {
        if children.len() != kind.arity() {
            return Err(GraphError::Arity {
                kind: kind.name(),
                expected: kind.arity(),
                got: children.len(),
            });
        }
        let mut child_shapes = Vec::with_capacity(children.len());
        for &c in &children {
            child_shapes.push(self.check_id(c)?.shape);
        }

        let shape = match &kind {
            NodeKind::Param { index } => {
                self.check_param(*index)?;
                Shape::Scalar
            }
            NodeKind::ParamVector { indices } => {
                if indices.is_empty() {
                    return Err(GraphError::EmptyVector("ParamVector"));
                }
                for &i in indices {
                    self.check_param(i)?;
                }
                Shape::Vector(indices.len())
            }
            NodeKind::ConstScalar(_) => Shape::Scalar,
            NodeKind::ConstVector(values) => {
                if values.is_empty() {
                    return Err(GraphError::EmptyVector("ConstVector"));
                }
                Shape::Vector(values.len())
            }
            NodeKind::Neg | NodeKind::Log | NodeKind::Exp => child_shapes[0],
            NodeKind::Sum => match child_shapes[0] {
                Shape::Vector(_) => Shape::Scalar,
                s => return Err(GraphError::SumOfScalar(s)),
            },
            k if k.is_elementwise_binary() => broadcast(k.name(), child_shapes[0], child_shapes[1])?,
            _ => unreachable!(),
        };

        self.nodes.push(Node { kind, children, shape });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check_param(&self, index: usize) -> Result<(), GraphError> {
        if index < self.params.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownParam { index })
        }
    }

    pub fn param(&mut self, index: usize) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Param { index }, vec![])
    }

    pub fn param_vector(&mut self, indices: Vec<usize>) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::ParamVector { indices }, vec![])
    }

    pub fn constant(&mut self, value: f64) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::ConstScalar(value), vec![])
    }

    pub fn const_vector(&mut self, values: Vec<f64>) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::ConstVector(values), vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Div, vec![a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Neg, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Log, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Exp, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(NodeKind::Sum, vec![a])
    }

    /// Structural check of a finished graph: child ordering and that every
    /// declared parameter is used somewhere.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut referenced = vec![false; self.params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                if c.0 >= i {
                    return Err(GraphError::ChildOutOfRange { child: c, len: i });
                }
            }
            match &node.kind {
                NodeKind::Param { index } => mark(&mut referenced, *index)?,
                NodeKind::ParamVector { indices } => {
                    for &ix in indices {
                        mark(&mut referenced, ix)?;
                    }
                }
                _ => {}
            }
        }
        if let Some(index) = referenced.iter().position(|r| !r) {
            return Err(GraphError::UnreferencedParam { index, name: self.params[index].name.clone() });
        }
        Ok(())
    }

    /// Post-order depth-first traversal from `root`. Children are visited in
    /// stored order and a node shared by several parents is emitted on first
    /// visit only.
    pub fn topo_order(&self, root: NodeId) -> Result<Vec<NodeId>, GraphError> {
        self.check_id(root)?;
        let mut visited = vec![false; self.nodes.len()];
        let mut order = Vec::new();
        // (node, index of next child to visit)
        let mut stack = vec![(root, 0usize)];
        visited[root.0] = true;
        while let Some((id, next)) = stack.pop() {
            let children = &self.nodes[id.0].children;
            if next < children.len() {
                stack.push((id, next + 1));
                let child = children[next];
                if !visited[child.0] {
                    visited[child.0] = true;
                    stack.push((child, 0));
                }
            } else {
                order.push(id);
            }
        }
        Ok(order)
    }

    /// Plain recursive evaluation of the subexpression at `root`. Shared
    /// subgraphs are recomputed on every path; there is no caching.
    pub fn eval(&self, root: NodeId, params: &[f64]) -> Result<Value, GraphError> {
        self.check_id(root)?;
        if params.len() != self.params.len() {
            return Err(GraphError::ParamCount { expected: self.params.len(), got: params.len() });
        }
        self.eval_node(root, params)
    }

    fn eval_node(&self, id: NodeId, params: &[f64]) -> Result<Value, GraphError> {
        let node = &self.nodes[id.0];
        let value = match &node.kind {
            NodeKind::Param { index } => Value::Scalar(params[*index]),
            NodeKind::ParamVector { indices } => Value::Vector(indices.iter().map(|&i| params[i]).collect()),
            NodeKind::ConstScalar(v) => Value::Scalar(*v),
            NodeKind::ConstVector(v) => Value::Vector(v.clone()),
            NodeKind::Neg => self.eval_node(node.children[0], params)?.map(|x| -x),
            NodeKind::Exp => self.eval_node(node.children[0], params)?.map(f64::exp),
            NodeKind::Log => {
                let arg = self.eval_node(node.children[0], params)?;
                if arg.lanes().iter().any(|&x| x <= 0.0 || x.is_nan()) {
                    return Err(GraphError::Domain { node: id, kind: "Log" });
                }
                arg.map(f64::ln)
            }
            NodeKind::Sum => match self.eval_node(node.children[0], params)? {
                Value::Vector(v) => Value::Scalar(v.iter().sum()),
                Value::Scalar(_) => unreachable!("shape checked at construction"),
            },
            NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div => {
                let a = self.eval_node(node.children[0], params)?;
                let b = self.eval_node(node.children[1], params)?;
                let f: fn(f64, f64) -> f64 = match node.kind {
                    NodeKind::Add => |x, y| x + y,
                    NodeKind::Sub => |x, y| x - y,
                    NodeKind::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                Value::zip(&a, &b, f)
            }
        };
        if value.lanes().iter().all(|x| x.is_finite()) {
            Ok(value)
        } else {
            Err(GraphError::Domain { node: id, kind: node.kind.name() })
        }
    }
}

fn mark(referenced: &mut [bool], index: usize) -> Result<(), GraphError> {
    match referenced.get_mut(index) {
        Some(r) => {
            *r = true;
            Ok(())
        }
        None => Err(GraphError::UnknownParam { index }),
    }
}

fn broadcast(kind: &'static str, left: Shape, right: Shape) -> Result<Shape, GraphError> {
    match (left, right) {
        (Shape::Scalar, s) | (s, Shape::Scalar) => Ok(s),
        (Shape::Vector(a), Shape::Vector(b)) if a == b => Ok(left),
        _ => Err(GraphError::ShapeMismatch { kind, left, right }),
    }
}

/// Result of evaluating a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            Value::Vector(_) => None,
        }
    }

    pub fn lanes(&self) -> &[f64] {
        match self {
            Value::Scalar(x) => std::slice::from_ref(x),
            Value::Vector(v) => v,
        }
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Value {
        match self {
            Value::Scalar(x) => Value::Scalar(f(x)),
            Value::Vector(v) => Value::Vector(v.into_iter().map(f).collect()),
        }
    }

    fn zip(a: &Value, b: &Value, f: fn(f64, f64) -> f64) -> Value {
        match (a, b) {
            (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(f(*x, *y)),
            (Value::Scalar(x), Value::Vector(v)) => Value::Vector(v.iter().map(|y| f(*x, *y)).collect()),
            (Value::Vector(v), Value::Scalar(y)) => Value::Vector(v.iter().map(|x| f(*x, *y)).collect()),
            (Value::Vector(u), Value::Vector(v)) => Value::Vector(u.iter().zip(v).map(|(x, y)| f(*x, *y)).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param() -> (ModelGraph, NodeId) {
        let mut g = ModelGraph::new();
        let i = g.declare_param("x", 1.0);
        let p = g.param(i).unwrap();
        (g, p)
    }

    #[test]
    fn first_append_is_node_zero() {
        let (_, p) = one_param();
        assert_eq!(p, NodeId(0));
    }

    #[test]
    fn scalar_vector_broadcast() {
        let (mut g, a) = one_param();
        let b = g.const_vector(vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.add(a, b).unwrap();
        assert_eq!(g.shape(s).unwrap(), Shape::Vector(3));
        let s2 = g.mul(b, a).unwrap();
        assert_eq!(g.shape(s2).unwrap(), Shape::Vector(3));
    }

    #[test]
    fn arity_and_shape_errors() {
        let (mut g, a) = one_param();
        let b = g.const_vector(vec![1.0, 2.0, 3.0]).unwrap();
        let c = g.const_vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.add_node(NodeKind::Log, vec![a, b]), Err(GraphError::Arity { .. })));
        assert!(matches!(g.add(b, c), Err(GraphError::ShapeMismatch { .. })));
        assert!(matches!(g.sum(a), Err(GraphError::SumOfScalar(_))));
        assert!(matches!(g.neg(NodeId(99)), Err(GraphError::ChildOutOfRange { .. })));
        assert!(matches!(g.param(7), Err(GraphError::UnknownParam { index: 7 })));
        assert!(matches!(g.const_vector(vec![]), Err(GraphError::EmptyVector(_))));
        assert!(matches!(g.param_vector(vec![]), Err(GraphError::EmptyVector(_))));
        // failed appends leave the table untouched
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn topo_order_leaf_and_post_order() {
        let (mut g, a) = one_param();
        assert_eq!(g.topo_order(a).unwrap(), vec![a]);
        let b = g.constant(2.0).unwrap();
        let root = g.add(a, b).unwrap();
        assert_eq!(g.topo_order(root).unwrap(), vec![a, b, root]);
        assert!(g.topo_order(NodeId(10)).is_err());
    }

    #[test]
    fn topo_order_diamond_visits_shared_child_once() {
        let (mut g, p) = one_param();
        let s1 = g.log(p).unwrap();
        let s2 = g.exp(p).unwrap();
        let root = g.mul(s1, s2).unwrap();
        assert_eq!(g.topo_order(root).unwrap(), vec![p, s1, s2, root]);
    }

    #[test]
    fn topo_order_skips_unreachable() {
        let (mut g, p) = one_param();
        let _unused = g.constant(5.0).unwrap();
        let root = g.neg(p).unwrap();
        assert_eq!(g.topo_order(root).unwrap(), vec![p, root]);
    }

    #[test]
    fn eval_examples() {
        let (mut g, p) = one_param();
        let two = g.constant(2.0).unwrap();
        let root = g.add(p, two).unwrap();
        assert_eq!(g.eval(root, &[1.0]).unwrap(), Value::Scalar(3.0));

        let v = g.const_vector(vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.sum(v).unwrap();
        assert_eq!(g.eval(s, &[1.0]).unwrap(), Value::Scalar(6.0));

        let zero = g.constant(0.0).unwrap();
        let bad = g.log(zero).unwrap();
        assert_eq!(g.eval(bad, &[1.0]), Err(GraphError::Domain { node: bad, kind: "Log" }));
        assert!(matches!(g.eval(root, &[]), Err(GraphError::ParamCount { .. })));
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let (mut g, p) = one_param();
        let zero = g.constant(0.0).unwrap();
        let d = g.div(p, zero).unwrap();
        assert!(matches!(g.eval(d, &[1.0]), Err(GraphError::Domain { .. })));
    }

    #[test]
    fn validate_finds_unreferenced_param() {
        let mut g = ModelGraph::new();
        let a = g.declare_param("a", 0.0);
        g.declare_param("b", 0.0);
        g.param(a).unwrap();
        assert!(matches!(g.validate(), Err(GraphError::UnreferencedParam { index: 1, .. })));
        g.param_vector(vec![1, 0]).unwrap();
        assert!(g.validate().is_ok());
    }
}
