use std::collections::{HashMap, HashSet};

use ndarray::{ArrayD, IxDyn};

use crate::var::{enable_grad, no_grad, Tensor, Var};

/// Nodes reachable from `root` through differentiable edges, parents before children.
fn topological_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !node.requires_grad() || !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for parent in &node.0.parents {
            if parent.requires_grad() && !visited.contains(&parent.id()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}

/// Gradients of a one-element `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are themselves graph nodes and
/// can be differentiated again (needed for gradient penalties). Without it
/// they are constants. Inputs that `output` does not depend on receive zeros.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.len(), 1, "grad needs a one-element output, got {:?}", output.shape());
    let _mode = if create_graph { enable_grad() } else { no_grad() };

    let mut grads: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(
            output.id(),
            Var::constant(ArrayD::ones(IxDyn(output.shape()))),
        );
    }
    let wanted: HashSet<u64> = inputs.iter().map(|v| v.id()).collect();

    for node in topological_order(output).iter().rev() {
        let Some(backward) = node.0.backward.as_ref() else {
            continue;
        };
        let upstream = match grads.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        if !wanted.contains(&node.id()) {
            grads.remove(&node.id());
        }
        let parent_grads = backward(&upstream, &node.0.parents, node);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (parent, g) in node.0.parents.iter().zip(parent_grads) {
            let Some(g) = g else { continue };
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(g.shape(), parent.shape(), "gradient shape mismatch");
            let merged = match grads.remove(&parent.id()) {
                Some(existing) => existing.add(&g),
                None => g,
            };
            grads.insert(parent.id(), merged);
        }
    }

    inputs
        .iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::zeros(v.shape()))
        })
        .collect()
}

/// First-order gradients as plain arrays.
pub fn gradients(output: &Var, inputs: &[&Var]) -> Vec<Tensor> {
    grad(output, inputs, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect()
}
