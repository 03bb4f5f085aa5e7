//! Draft-tree growth and traversal.
//!
//! [`grow_tree`] implements the Greedy sampling strategy: at every non-leaf
//! node the children are the `m-1` highest-probability draft tokens plus
//! one token sampled from the residual draft distribution (stored last).
//! [`grow_tree_wor`] grows the candidate tree the RRSw-family verifiers
//! expect, sampling all `m` children sequentially without replacement.
//! Both consume rng draws in breadth-first node order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dist::{residual_without, top_k, Dist};
use crate::error::{Error, Result};
use crate::model::ConditionalModel;
use crate::rng::UniformStream;
use crate::Token;

/// Uniform-width topology: `widths[d]` children for every node at depth `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    widths: Vec<usize>,
}

impl Topology {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::BadConfig("topology must have depth >= 1".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::BadConfig("every topology width must be >= 1".into()));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Total node count including the root anchor.
    pub fn node_count(&self) -> usize {
        let mut layer = 1usize;
        let mut total = 1usize;
        for &w in &self.widths {
            layer *= w;
            total += layer;
        }
        total
    }

    /// Compact tag used in result tables, e.g. `2-2-2`.
    pub fn tag(&self) -> String {
        self.widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// One node of a draft tree. The root is a token-less anchor standing for
/// the already-accepted prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: Option<Token>,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Child node indices in stored order; under Greedy growth the
    /// residual-sampled child is last.
    pub children: Vec<usize>,
    /// Draft distribution at this node's context.
    pub draft_dist: Dist,
    /// Residual draft distribution (top tokens removed); absent at leaves.
    pub residual_dist: Option<Dist>,
}

impl DraftNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Index (into `children`) of the residual-sampled child: by
    /// construction the last one.
    pub fn sampled_child(&self) -> Option<usize> {
        self.children.last().copied()
    }
}

/// A grown draft tree over `prefix`, nodes stored in breadth-first order
/// with the root anchor at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub(crate) nodes: Vec<DraftNode>,
    pub(crate) prefix: Vec<Token>,
    pub(crate) topology: Topology,
}

impl DraftTree {
    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &DraftNode {
        &self.nodes[idx]
    }

    pub fn prefix(&self) -> &[Token] {
        &self.prefix
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Draft tokens on the chain from the root anchor down to `idx`
    /// (excluding the prefix).
    pub fn chain_tokens(&self, idx: usize) -> Vec<Token> {
        let mut tokens = Vec::with_capacity(self.nodes[idx].depth);
        let mut cur = idx;
        while let Some(tok) = self.nodes[cur].token {
            tokens.push(tok);
            cur = self.nodes[cur].parent.expect("non-root has a parent");
        }
        tokens.reverse();
        tokens
    }

    /// Full model context for `idx`: prefix followed by the chain tokens.
    pub fn context(&self, idx: usize) -> Vec<Token> {
        let mut ctx = self.prefix.clone();
        ctx.extend(self.chain_tokens(idx));
        ctx
    }

    /// Post-order node indices: each node's children subtrees (in child
    /// order) precede the node; the root is last.
    pub fn post_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        self.post_order_into(0, &mut order);
        order
    }

    fn post_order_into(&self, idx: usize, order: &mut Vec<usize>) {
        for &child in &self.nodes[idx].children {
            self.post_order_into(child, order);
        }
        order.push(idx);
    }
}

/// Top tokens and residual for one node; errors when the draft support is
/// smaller than the requested child count.
fn split_top_residual(dist: &Dist, m: usize, depth: usize) -> Result<(Vec<Token>, Dist)> {
    let support = dist.support_size();
    if support < m {
        return Err(Error::InsufficientSupport {
            support,
            required: m,
            depth,
        });
    }
    let top = top_k(dist, m - 1);
    debug_assert_eq!(top.len(), m - 1);
    let residual = if top.is_empty() {
        dist.clone()
    } else {
        residual_without(dist, &top)?
    };
    Ok((top, residual))
}

fn push_child(
    nodes: &mut Vec<DraftNode>,
    parent: usize,
    token: Token,
    draft: &ConditionalModel,
    prefix: &[Token],
) -> Result<()> {
    let depth = nodes[parent].depth + 1;
    let mut ctx = prefix.to_vec();
    {
        // Rebuild the parent chain once; growth is breadth-first so this
        // stays cheap at desk scale.
        let mut chain = Vec::with_capacity(depth);
        let mut cur = parent;
        while let Some(tok) = nodes[cur].token {
            chain.push(tok);
            cur = nodes[cur].parent.expect("non-root has a parent");
        }
        chain.reverse();
        ctx.extend(chain);
        ctx.push(token);
    }
    let draft_dist = draft.eval(&ctx)?;
    let idx = nodes.len();
    nodes.push(DraftNode {
        token: Some(token),
        parent: Some(parent),
        depth,
        children: Vec::new(),
        draft_dist,
        residual_dist: None,
    });
    nodes[parent].children.push(idx);
    Ok(())
}

fn root_node(draft: &ConditionalModel, prefix: &[Token]) -> Result<DraftNode> {
    Ok(DraftNode {
        token: None,
        parent: None,
        depth: 0,
        children: Vec::new(),
        draft_dist: draft.eval(prefix)?,
        residual_dist: None,
    })
}

/// Grow a draft tree under the Greedy sampling strategy, consuming one rng
/// draw per non-leaf node in breadth-first order.
pub fn grow_tree(
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    rng: &mut UniformStream,
) -> Result<DraftTree> {
    let mut nodes = vec![root_node(draft, prefix)?];
    let mut q = 0;
    while q < nodes.len() {
        let depth = nodes[q].depth;
        if depth < topo.depth() {
            let m = topo.widths()[depth];
            let (top, residual) = split_top_residual(&nodes[q].draft_dist, m, depth)?;
            let sampled = residual.sample(rng.next_uniform());
            nodes[q].residual_dist = Some(residual);
            for &t in &top {
                push_child(&mut nodes, q, t, draft, prefix)?;
            }
            push_child(&mut nodes, q, sampled, draft, prefix)?;
        }
        q += 1;
    }
    debug_assert_eq!(nodes.len(), topo.node_count());
    Ok(DraftTree {
        nodes,
        prefix: prefix.to_vec(),
        topology: topo.clone(),
    })
}

/// Grow a candidate tree by sampling every child sequentially without
/// replacement from the draft distribution (the drafting law assumed by
/// the RRSw-based verifiers). Consumes `m` rng draws per non-leaf node in
/// breadth-first order.
pub fn grow_tree_wor(
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    rng: &mut UniformStream,
) -> Result<DraftTree> {
    let mut nodes = vec![root_node(draft, prefix)?];
    let mut q = 0;
    while q < nodes.len() {
        let depth = nodes[q].depth;
        if depth < topo.depth() {
            let m = topo.widths()[depth];
            let support = nodes[q].draft_dist.support_size();
            if support < m {
                return Err(Error::InsufficientSupport {
                    support,
                    required: m,
                    depth,
                });
            }
            let mut remaining = nodes[q].draft_dist.clone();
            let mut chosen = Vec::with_capacity(m);
            for i in 0..m {
                let t = remaining.sample(rng.next_uniform());
                chosen.push(t);
                if i + 1 < m {
                    remaining = residual_without(&remaining, &[t])?;
                }
            }
            for &t in &chosen {
                push_child(&mut nodes, q, t, draft, prefix)?;
            }
        }
        q += 1;
    }
    Ok(DraftTree {
        nodes,
        prefix: prefix.to_vec(),
        topology: topo.clone(),
    })
}

/// Enumerate every realizable Greedy-strategy tree together with its
/// drafting probability `p_draft(T)` (the product of the residual-sampling
/// probabilities over non-leaf nodes). The callback borrows a scratch tree
/// that is rebuilt in place between calls.
pub fn for_each_tree<F>(
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    cap: u64,
    f: &mut F,
) -> Result<u64>
where
    F: FnMut(&DraftTree, f64) -> Result<()>,
{
    let mut tree = DraftTree {
        nodes: vec![root_node(draft, prefix)?],
        prefix: prefix.to_vec(),
        topology: topo.clone(),
    };
    let mut eval_cache: HashMap<Vec<Token>, Dist> = HashMap::new();
    let mut count = 0u64;
    descend(draft, topo, &mut tree, 0, 1.0, cap, &mut count, &mut eval_cache, f)?;
    Ok(count)
}

#[allow(clippy::too_many_arguments)]
fn descend<F>(
    draft: &ConditionalModel,
    topo: &Topology,
    tree: &mut DraftTree,
    q: usize,
    prob: f64,
    cap: u64,
    count: &mut u64,
    eval_cache: &mut HashMap<Vec<Token>, Dist>,
    f: &mut F,
) -> Result<()>
where
    F: FnMut(&DraftTree, f64) -> Result<()>,
{
    if q == tree.nodes.len() {
        *count += 1;
        if *count > cap {
            return Err(Error::ExplosionCap { cap });
        }
        return f(tree, prob);
    }
    let depth = tree.nodes[q].depth;
    if depth >= topo.depth() {
        return descend(draft, topo, tree, q + 1, prob, cap, count, eval_cache, f);
    }
    let m = topo.widths()[depth];
    let (top, residual) = split_top_residual(&tree.nodes[q].draft_dist, m, depth)?;
    tree.nodes[q].residual_dist = Some(residual.clone());
    let base_len = tree.nodes.len();
    let sampled_options: Vec<Token> = residual.support().collect();
    for sampled in sampled_options {
        let p = residual.prob(sampled);
        for &t in top.iter().chain(std::iter::once(&sampled)) {
            push_child_cached(tree, q, t, draft, eval_cache)?;
        }
        descend(draft, topo, tree, q + 1, prob * p, cap, count, eval_cache, f)?;
        tree.nodes.truncate(base_len);
        tree.nodes[q].children.clear();
    }
    tree.nodes[q].residual_dist = None;
    Ok(())
}

fn push_child_cached(
    tree: &mut DraftTree,
    parent: usize,
    token: Token,
    draft: &ConditionalModel,
    eval_cache: &mut HashMap<Vec<Token>, Dist>,
) -> Result<()> {
    let mut ctx = tree.context(parent);
    ctx.push(token);
    let draft_dist = match eval_cache.get(&ctx) {
        Some(d) => d.clone(),
        None => {
            let d = draft.eval(&ctx)?;
            eval_cache.insert(ctx, d.clone());
            d
        }
    };
    let idx = tree.nodes.len();
    let depth = tree.nodes[parent].depth + 1;
    tree.nodes.push(DraftNode {
        token: Some(token),
        parent: Some(parent),
        depth,
        children: Vec::new(),
        draft_dist,
        residual_dist: None,
    });
    tree.nodes[parent].children.push(idx);
    Ok(())
}

/// Materialized variant of [`for_each_tree`].
pub fn enumerate_trees(
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    cap: u64,
) -> Result<Vec<(DraftTree, f64)>> {
    let mut out = Vec::new();
    for_each_tree(draft, topo, prefix, cap, &mut |tree, p| {
        out.push((tree.clone(), p));
        Ok(())
    })?;
    Ok(out)
}
