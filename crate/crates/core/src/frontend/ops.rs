//! Tensor-operator graphs and their loop nests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FrontendError;
use crate::itensor::ElementKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Matmul,
    ElementwiseUnary,
    ElementwiseBinary,
    Reduction,
    Transpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    Parallel,
    Reduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopDesc {
    pub tripcount: usize,
    pub kind: LoopKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub shape: Vec<usize>,
    #[serde(default = "ElementKind::f32")]
    pub kind: ElementKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: String,
    pub template: Template,
    pub inputs: Vec<String>,
    pub output: String,
    /// Output dim `d` reads input dim `perm[d]` (transpose only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perm: Option<Vec<usize>>,
}

/// Which loop indexes each dim of one operand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub tensor: String,
    pub loops: Vec<usize>,
}

/// Loop nest of one op with the access pattern of every operand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopNest {
    pub loops: Vec<LoopDesc>,
    pub inputs: Vec<Access>,
    pub output: Access,
    pub output_shape: Vec<usize>,
}

impl LoopNest {
    pub fn reduction_loops(&self) -> impl Iterator<Item = usize> + '_ {
        self.loops
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LoopKind::Reduction)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpGraph {
    pub tensors: BTreeMap<String, TensorDecl>,
    pub ops: Vec<OpNode>,
    /// Tensors written back to memory. Defaults to produced tensors nobody
    /// reads.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
}

impl OpGraph {
    pub fn from_json(text: &str) -> Result<Self, FrontendError> {
        let g: OpGraph = serde_json::from_str(text).map_err(|e| FrontendError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        g.normalized()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("op graph serializes")
    }

    pub fn producer(&self, tensor: &str) -> Option<&OpNode> {
        self.ops.iter().find(|o| o.output == tensor)
    }

    pub fn graph_inputs(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .ops
            .iter()
            .flat_map(|o| o.inputs.iter())
            .filter(|t| self.producer(t).is_none())
            .cloned()
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn graph_outputs(&self) -> Vec<String> {
        if !self.outputs.is_empty() {
            return self.outputs.clone();
        }
        self.ops
            .iter()
            .map(|o| o.output.clone())
            .filter(|t| !self.ops.iter().any(|o| o.inputs.contains(t)))
            .collect()
    }

    pub fn decl(&self, tensor: &str) -> Result<&TensorDecl, FrontendError> {
        self.tensors
            .get(tensor)
            .ok_or_else(|| FrontendError::UnknownTensor(tensor.to_string()))
    }

    /// Every op's nest must be well formed, every output produced exactly
    /// once, and the op graph acyclic.
    pub fn check(&self) -> Result<(), FrontendError> {
        self.clone().normalized().map(|_| ())
    }

    /// Checks the graph and declares every undeclared intermediate tensor
    /// with its inferred shape and kind.
    pub fn normalized(mut self) -> Result<Self, FrontendError> {
        let mut produced = std::collections::HashSet::new();
        for op in &self.ops {
            if !produced.insert(op.output.as_str()) {
                return Err(FrontendError::Op {
                    op: op.id.clone(),
                    msg: format!("tensor `{}` is produced twice", op.output),
                });
            }
        }
        for i in self.op_order()? {
            let op = self.ops[i].clone();
            let nest = self.loop_nest(&op)?;
            if !self.tensors.contains_key(&op.output) {
                let kind = self.kind_of(&op.output);
                self.tensors.insert(
                    op.output.clone(),
                    TensorDecl {
                        shape: nest.output_shape,
                        kind,
                    },
                );
            }
        }
        for out in &self.outputs {
            self.decl(out)?;
        }
        Ok(self)
    }

    /// Ops with producers before consumers, ties by id.
    pub fn op_order(&self) -> Result<Vec<usize>, FrontendError> {
        let n = self.ops.len();
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n)
                .filter(|&i| !done[i])
                .filter(|&i| {
                    self.ops[i].inputs.iter().all(|t| {
                        self.ops
                            .iter()
                            .position(|o| &o.output == t)
                            .is_none_or(|p| done[p])
                    })
                })
                .min_by(|&a, &b| self.ops[a].id.cmp(&self.ops[b].id));
            match next {
                Some(i) => {
                    done[i] = true;
                    order.push(i);
                }
                None => return Err(FrontendError::CyclicOps),
            }
        }
        Ok(order)
    }

    /// Loops and access patterns implied by the op template.
    pub fn loop_nest(&self, op: &OpNode) -> Result<LoopNest, FrontendError> {
        let bad = |msg: String| FrontendError::Op {
            op: op.id.clone(),
            msg,
        };
        let shapes: Vec<&Vec<usize>> = op
            .inputs
            .iter()
            .map(|t| self.decl(t).map(|d| &d.shape))
            .collect::<Result<_, _>>()?;
        let want_inputs = match op.template {
            Template::ElementwiseBinary | Template::Matmul => 2,
            _ => 1,
        };
        if shapes.len() != want_inputs {
            return Err(bad(format!("{:?} takes {want_inputs} input(s)", op.template)));
        }
        let par = |t: usize| LoopDesc {
            tripcount: t,
            kind: LoopKind::Parallel,
        };
        let acc = |i: usize, loops: Vec<usize>| Access {
            tensor: op.inputs[i].clone(),
            loops,
        };
        let (loops, inputs, out_loops, output_shape) = match op.template {
            Template::Matmul => {
                let (a, b) = (shapes[0], shapes[1]);
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return Err(bad(format!("matmul shapes {a:?} x {b:?} do not chain")));
                }
                let loops = vec![
                    par(a[0]),
                    par(b[1]),
                    LoopDesc {
                        tripcount: a[1],
                        kind: LoopKind::Reduction,
                    },
                ];
                (loops, vec![acc(0, vec![0, 2]), acc(1, vec![2, 1])], vec![0, 1], vec![a[0], b[1]])
            }
            Template::ElementwiseUnary => {
                let x = shapes[0];
                let all: Vec<usize> = (0..x.len()).collect();
                (x.iter().map(|&t| par(t)).collect(), vec![acc(0, all.clone())], all, x.clone())
            }
            Template::ElementwiseBinary => {
                let (x, y) = (shapes[0], shapes[1]);
                // The second operand may broadcast over trailing dims.
                if y.len() > x.len() || x[..y.len()] != y[..] {
                    return Err(bad(format!("cannot broadcast {y:?} against {x:?}")));
                }
                let all: Vec<usize> = (0..x.len()).collect();
                let prefix: Vec<usize> = (0..y.len()).collect();
                (
                    x.iter().map(|&t| par(t)).collect(),
                    vec![acc(0, all.clone()), acc(1, prefix)],
                    all,
                    x.clone(),
                )
            }
            Template::Reduction => {
                let x = shapes[0];
                if x.len() < 2 {
                    return Err(bad("reduction needs rank >= 2".into()));
                }
                let r = x.len() - 1;
                let mut loops: Vec<LoopDesc> = x.iter().map(|&t| par(t)).collect();
                loops[r].kind = LoopKind::Reduction;
                (loops, vec![acc(0, (0..=r).collect())], (0..r).collect(), x[..r].to_vec())
            }
            Template::Transpose => {
                let x = shapes[0];
                let perm = op.perm.clone().unwrap_or_else(|| (0..x.len()).rev().collect());
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != (0..x.len()).collect::<Vec<_>>() {
                    return Err(bad(format!("{perm:?} is not a permutation of rank {}", x.len())));
                }
                let out_shape = perm.iter().map(|&p| x[p]).collect();
                (
                    x.iter().map(|&t| par(t)).collect(),
                    vec![acc(0, (0..x.len()).collect())],
                    perm,
                    out_shape,
                )
            }
        };
        if let Some(decl) = self.tensors.get(&op.output) {
            if decl.shape != output_shape {
                return Err(bad(format!(
                    "declared output shape {:?} differs from computed {output_shape:?}",
                    decl.shape
                )));
            }
        }
        Ok(LoopNest {
            loops,
            inputs,
            output: Access {
                tensor: op.output.clone(),
                loops: out_loops,
            },
            output_shape,
        })
    }

    /// Element kind of a tensor; undeclared outputs take their first
    /// input's kind.
    pub fn kind_of(&self, tensor: &str) -> ElementKind {
        if let Some(d) = self.tensors.get(tensor) {
            return d.kind.clone();
        }
        self.producer(tensor)
            .and_then(|op| op.inputs.first())
            .map(|t| self.kind_of(t))
            .unwrap_or_else(ElementKind::f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(ops: Vec<OpNode>, tensors: &[(&str, Vec<usize>)]) -> OpGraph {
        OpGraph {
            tensors: tensors
                .iter()
                .map(|(n, s)| {
                    (
                        n.to_string(),
                        TensorDecl {
                            shape: s.clone(),
                            kind: ElementKind::f32(),
                        },
                    )
                })
                .collect(),
            ops,
            outputs: vec![],
        }
    }

    fn op(id: &str, template: Template, inputs: &[&str], output: &str) -> OpNode {
        OpNode {
            id: id.into(),
            template,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.into(),
            perm: None,
        }
    }

    #[test]
    fn matmul_nest() {
        let g = graph(
            vec![op("mm", Template::Matmul, &["a", "b"], "c")],
            &[("a", vec![8, 4]), ("b", vec![4, 6])],
        );
        let nest = g.loop_nest(&g.ops[0]).unwrap();
        assert_eq!(nest.loops.iter().map(|l| l.tripcount).collect::<Vec<_>>(), [8, 6, 4]);
        assert_eq!(nest.reduction_loops().collect::<Vec<_>>(), [2]);
        assert_eq!(nest.inputs[0].loops, [0, 2]);
        assert_eq!(nest.inputs[1].loops, [2, 1]);
        assert_eq!(nest.output_shape, [8, 6]);
        assert_eq!(g.graph_inputs(), ["a", "b"]);
        assert_eq!(g.graph_outputs(), ["c"]);
    }

    #[test]
    fn shape_errors() {
        let g = graph(
            vec![op("mm", Template::Matmul, &["a", "b"], "c")],
            &[("a", vec![8, 4]), ("b", vec![5, 6])],
        );
        assert!(matches!(g.check(), Err(FrontendError::Op { .. })));
        let g = graph(vec![op("x", Template::ElementwiseBinary, &["a", "b"], "c")], &[("a", vec![8, 4]), ("b", vec![4])]);
        assert!(g.check().is_err());
        let g = graph(vec![op("x", Template::ElementwiseBinary, &["a", "b"], "c")], &[("a", vec![8, 4]), ("b", vec![8])]);
        g.check().unwrap();
    }

    #[test]
    fn transpose_and_reduction() {
        let g = graph(
            vec![
                op("t", Template::Transpose, &["a"], "at"),
                op("r", Template::Reduction, &["at"], "s"),
            ],
            &[("a", vec![8, 4])],
        )
        .normalized()
        .unwrap();
        assert_eq!(g.tensors["at"].shape, [4, 8]);
        let t = g.loop_nest(&g.ops[0]).unwrap();
        assert_eq!(t.output.loops, [1, 0]);
        assert_eq!(t.output_shape, [4, 8]);
        let r = g.loop_nest(&g.ops[1]).unwrap();
        assert_eq!(r.output_shape, [4]);
        assert_eq!(r.reduction_loops().collect::<Vec<_>>(), [1]);
    }

    #[test]
    fn cycles_and_json() {
        let g = graph(
            vec![
                op("p", Template::ElementwiseUnary, &["y"], "x"),
                op("q", Template::ElementwiseUnary, &["x"], "y"),
            ],
            &[("x", vec![4]), ("y", vec![4])],
        );
        assert_eq!(g.op_order(), Err(FrontendError::CyclicOps));
        let ok = graph(vec![op("p", Template::ElementwiseUnary, &["a"], "b")], &[("a", vec![4, 4])]);
        assert_eq!(OpGraph::from_json(&ok.to_json()).unwrap(), ok.clone().normalized().unwrap());
        assert!(matches!(OpGraph::from_json("{\"ops\": [}"), Err(FrontendError::Parse { .. })));
    }
}
