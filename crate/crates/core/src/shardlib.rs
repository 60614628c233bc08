//! Duplicated code shards in firmware images.
//!
//! A generalised suffix tree (Ukkonen's online construction) finds the
//! longest repeated byte string; repeats are recorded as shards, their
//! replicas scrambled, and the search repeated. A compression plan then
//! replaces every occurrence with a CALL/JUMP pair to a single subroutine
//! copy, which frees memory that malware could occupy.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LEAF_END: usize = usize::MAX;
const ROOT: usize = 0;
const SENTINEL: u32 = u32::MAX;
/// Symbols at or above this value are unique per position.
const UNIQUE_BASE: u32 = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShardError {
    #[error("mask has {mask} entries but image has {image} bytes")]
    MaskLength { mask: usize, image: usize },
    #[error("minimum shard length {0} is below 4")]
    MinLength(usize),
    #[error("alignment must be 1 or 2, got {0}")]
    Alignment(usize),
    #[error("occurrences at {a} and {b} overlap")]
    Overlap { a: usize, b: usize },
    #[error("plan was made for a {plan}-byte image, got {image} bytes")]
    LengthMismatch { plan: usize, image: usize },
    #[error("image bytes at offset {0} do not match the planned shard")]
    ContentMismatch(usize),
    #[error("instruction sizes must be at least 1 byte")]
    IsaSize,
}

pub type Result<T> = std::result::Result<T, ShardError>;

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    link: usize,
}

/// Suffix tree over a symbol string terminated by a unique sentinel.
#[derive(Debug, Clone)]
pub struct SuffixTree {
    text: Vec<u32>,
    nodes: Vec<Node>,
    children: Vec<Vec<usize>>,
    /// String depth of every node.
    depth: Vec<usize>,
    /// Suffix start for leaves, `usize::MAX` for internal nodes.
    suffix: Vec<usize>,
}

impl SuffixTree {
    /// Tree over raw bytes.
    pub fn new(data: &[u8]) -> Self {
        Self::from_symbols(data.iter().map(|&b| b as u32).collect())
    }

    /// Tree over bytes where every masked position is replaced by a symbol
    /// that occurs nowhere else, so no repeat can span it.
    pub fn with_mask(data: &[u8], mask: &[bool]) -> Self {
        let symbols = data
            .iter()
            .zip(mask)
            .enumerate()
            .map(|(i, (&b, &m))| if m { UNIQUE_BASE + i as u32 } else { b as u32 })
            .collect();
        Self::from_symbols(symbols)
    }

    fn from_symbols(mut text: Vec<u32>) -> Self {
        text.push(SENTINEL);
        let n = text.len();
        let mut nodes = vec![Node {
            start: 0,
            end: 0,
            link: ROOT,
        }];
        let mut edges: FxHashMap<(usize, u32), usize> = FxHashMap::default();
        edges.reserve(2 * n);

        let mut active_node = ROOT;
        let mut active_edge = 0usize;
        let mut active_len = 0usize;
        let mut remainder = 0usize;

        for i in 0..n {
            remainder += 1;
            let mut last_internal: Option<usize> = None;
            while remainder > 0 {
                if active_len == 0 {
                    active_edge = i;
                }
                let c = text[active_edge];
                match edges.get(&(active_node, c)).copied() {
                    None => {
                        let leaf = nodes.len();
                        nodes.push(Node {
                            start: i,
                            end: LEAF_END,
                            link: ROOT,
                        });
                        edges.insert((active_node, c), leaf);
                        if let Some(prev) = last_internal.take() {
                            nodes[prev].link = active_node;
                        }
                    }
                    Some(next) => {
                        let edge_len = nodes[next].end.min(i + 1) - nodes[next].start;
                        if active_len >= edge_len {
                            active_edge += edge_len;
                            active_len -= edge_len;
                            active_node = next;
                            continue;
                        }
                        if text[nodes[next].start + active_len] == text[i] {
                            if let Some(prev) = last_internal.take() {
                                if active_node != ROOT {
                                    nodes[prev].link = active_node;
                                }
                            }
                            active_len += 1;
                            break;
                        }
                        let split = nodes.len();
                        let split_start = nodes[next].start;
                        nodes.push(Node {
                            start: split_start,
                            end: split_start + active_len,
                            link: ROOT,
                        });
                        edges.insert((active_node, c), split);
                        let leaf = nodes.len();
                        nodes.push(Node {
                            start: i,
                            end: LEAF_END,
                            link: ROOT,
                        });
                        edges.insert((split, text[i]), leaf);
                        nodes[next].start += active_len;
                        edges.insert((split, text[nodes[next].start]), next);
                        if let Some(prev) = last_internal.replace(split) {
                            nodes[prev].link = split;
                        }
                    }
                }
                remainder -= 1;
                if active_node == ROOT && active_len > 0 {
                    active_len -= 1;
                    active_edge = i + 1 - remainder;
                } else if active_node != ROOT {
                    active_node = nodes[active_node].link;
                }
            }
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for (&(parent, _), &child) in &edges {
            children[parent].push(child);
        }
        for c in &mut children {
            c.sort_unstable_by_key(|&ch| text[nodes[ch].start]);
        }

        let mut tree = SuffixTree {
            depth: vec![0; nodes.len()],
            suffix: vec![usize::MAX; nodes.len()],
            text,
            nodes,
            children,
        };
        tree.annotate();
        tree
    }

    fn edge_len(&self, node: usize) -> usize {
        self.nodes[node].end.min(self.text.len()) - self.nodes[node].start
    }

    fn annotate(&mut self) {
        let n = self.text.len();
        let mut stack = vec![ROOT];
        while let Some(v) = stack.pop() {
            for &c in &self.children[v] {
                self.depth[c] = self.depth[v] + self.edge_len(c);
                if self.children[c].is_empty() {
                    self.suffix[c] = n - self.depth[c];
                }
                stack.push(c);
            }
        }
    }

    /// Length of the indexed data, sentinel excluded.
    pub fn data_len(&self) -> usize {
        self.text.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.children.iter().filter(|c| c.is_empty()).count()
    }

    fn is_internal(&self, v: usize) -> bool {
        v != ROOT && !self.children[v].is_empty()
    }

    /// Nodes in an order where every child precedes its parent.
    fn postorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![ROOT];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend_from_slice(&self.children[v]);
        }
        order.reverse();
        order
    }

    /// Sorted suffix starts below `v`.
    fn leaves_under(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            if self.children[u].is_empty() {
                out.push(self.suffix[u]);
            } else {
                stack.extend_from_slice(&self.children[u]);
            }
        }
        out.sort_unstable();
        out
    }

    /// Whether `pattern` occurs in the indexed data.
    pub fn contains(&self, pattern: &[u8]) -> bool {
        let mut node = ROOT;
        let mut i = 0;
        while i < pattern.len() {
            let Some(&next) = self.children[node]
                .iter()
                .find(|&&c| self.text[self.nodes[c].start] == pattern[i] as u32)
            else {
                return false;
            };
            let start = self.nodes[next].start;
            for k in 0..self.edge_len(next) {
                if i == pattern.len() {
                    return true;
                }
                if self.text[start + k] != pattern[i] as u32 {
                    return false;
                }
                i += 1;
            }
            node = next;
        }
        true
    }

    /// Every suffix of the data as a root-to-leaf path, checked by spelling
    /// each leaf's path label.
    pub fn verify_suffixes(&self) -> bool {
        let n = self.text.len();
        let mut starts = vec![false; n];
        let mut stack: Vec<(usize, Vec<u32>)> = vec![(ROOT, Vec::new())];
        // path labels are only materialised for small trees
        if n > 4096 {
            return self.leaf_count() == n;
        }
        while let Some((v, label)) = stack.pop() {
            if self.children[v].is_empty() && v != ROOT {
                let s = self.suffix[v];
                if label[..] != self.text[s..] || starts[s] {
                    return false;
                }
                starts[s] = true;
                continue;
            }
            for &c in &self.children[v] {
                let mut l = label.clone();
                let node = &self.nodes[c];
                l.extend_from_slice(&self.text[node.start..node.end.min(n)]);
                stack.push((c, l));
            }
        }
        starts.iter().all(|&s| s)
    }
}

/// A duplicated byte string and where it occurs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub length: usize,
    /// Sorted offsets, at least two.
    pub offsets: Vec<usize>,
    #[serde(with = "hex::serde")]
    pub bytes: Vec<u8>,
}

/// Longest repeated substring (occurrences may overlap). Among equally long
/// repeats the one starting earliest wins.
pub fn longest_repeat(tree: &SuffixTree) -> Option<Shard> {
    let order = tree.postorder();
    let mut min_leaf = vec![usize::MAX; tree.nodes.len()];
    for &v in &order {
        if tree.children[v].is_empty() {
            min_leaf[v] = tree.suffix[v];
        } else {
            min_leaf[v] = tree.children[v].iter().map(|&c| min_leaf[c]).min().unwrap_or(usize::MAX);
        }
    }
    let best = order
        .iter()
        .copied()
        .filter(|&v| tree.is_internal(v))
        .max_by(|&a, &b| {
            tree.depth[a]
                .cmp(&tree.depth[b])
                .then(min_leaf[b].cmp(&min_leaf[a]))
        })?;
    let offsets = tree.leaves_under(best);
    let length = tree.depth[best];
    let start = offsets[0];
    let bytes = tree.text[start..start + length].iter().map(|&s| s as u8).collect();
    Some(Shard {
        length,
        offsets,
        bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardOptions {
    pub min_len: usize,
    /// One entry per image byte; `true` marks control-flow bytes that may not
    /// be part of a shard.
    pub mask: Option<Vec<bool>>,
    /// Instruction alignment. Defaults to 2 when a mask is supplied.
    pub alignment: Option<usize>,
    /// Seed for the bytes that overwrite replicas.
    pub seed: u64,
}

impl Default for ShardOptions {
    fn default() -> Self {
        Self {
            min_len: 16,
            mask: None,
            alignment: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardReport {
    pub image_len: usize,
    pub min_len: usize,
    pub alignment: usize,
    /// Discovery order.
    pub shards: Vec<Shard>,
}

impl ShardReport {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.length).collect()
    }
}

/// Parses a mask file: one byte per image byte, `0` or `1` (raw or ASCII).
pub fn parse_mask(raw: &[u8]) -> Vec<bool> {
    raw.iter().map(|&b| b == 1 || b == b'1').collect()
}

/// Greedy longest-first shard extraction. Every recorded shard keeps its
/// first occurrence and has the others overwritten with seeded random bytes;
/// kept occurrences are excluded from later searches so shards never overlap.
pub fn find_shards(image: &[u8], opts: &ShardOptions) -> Result<ShardReport> {
    if opts.min_len < 4 {
        return Err(ShardError::MinLength(opts.min_len));
    }
    if let Some(mask) = &opts.mask {
        if mask.len() != image.len() {
            return Err(ShardError::MaskLength {
                mask: mask.len(),
                image: image.len(),
            });
        }
    }
    let alignment = opts
        .alignment
        .unwrap_or(if opts.mask.is_some() { 2 } else { 1 });
    if alignment != 1 && alignment != 2 {
        return Err(ShardError::Alignment(alignment));
    }
    let mut report = ShardReport {
        image_len: image.len(),
        min_len: opts.min_len,
        alignment,
        shards: Vec::new(),
    };
    if image.len() < opts.min_len {
        return Ok(report);
    }
    let mut work = image.to_vec();
    let mut frozen = opts.mask.clone().unwrap_or_else(|| vec![false; image.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    loop {
        let tree = SuffixTree::with_mask(&work, &frozen);
        let Some(shard) = best_disjoint_repeat(&tree, &work, alignment, opts.min_len) else {
            break;
        };
        for &o in &shard.offsets[1..] {
            rng.fill_bytes(&mut work[o..o + shard.length]);
        }
        let first = shard.offsets[0];
        frozen[first..first + shard.length].fill(true);
        report.shards.push(shard);
    }
    Ok(report)
}

/// Longest repeat with at least two non-overlapping, aligned occurrences.
fn best_disjoint_repeat(tree: &SuffixTree, data: &[u8], align: usize, min_len: usize) -> Option<Shard> {
    let order = tree.postorder();
    let nn = tree.nodes.len();
    // smallest and largest aligned suffix start below each node
    let mut lo = vec![usize::MAX; nn];
    let mut hi = vec![0usize; nn];
    let mut any = vec![false; nn];
    for &v in &order {
        if tree.children[v].is_empty() {
            let s = tree.suffix[v];
            if s < data.len() && s % align == 0 {
                lo[v] = s;
                hi[v] = s;
                any[v] = true;
            }
        } else {
            for &c in &tree.children[v] {
                if any[c] {
                    lo[v] = lo[v].min(lo[c]);
                    hi[v] = hi[v].max(hi[c]);
                    any[v] = true;
                }
            }
        }
    }
    let mut best: Option<(usize, usize, usize)> = None; // (len, first, node)
    for &v in &order {
        if !tree.is_internal(v) || !any[v] || lo[v] == hi[v] {
            continue;
        }
        let mut len = tree.depth[v].min(hi[v] - lo[v]);
        len -= len % align;
        if len < min_len {
            continue;
        }
        let better = match best {
            None => true,
            Some((bl, bf, _)) => len > bl || (len == bl && lo[v] < bf),
        };
        if better {
            best = Some((len, lo[v], v));
        }
    }
    let (len, first, _) = best?;
    let pattern = &data[first..first + len];
    // all aligned occurrences of the chosen prefix, then a greedy disjoint pick
    let mut offsets: Vec<usize> = Vec::new();
    let mut pos = 0;
    while pos + len <= data.len() {
        if &data[pos..pos + len] == pattern && tree_allows(tree, pos, len) {
            offsets.push(pos);
            pos += len;
            pos += (align - pos % align) % align;
        } else {
            pos += align;
        }
    }
    (offsets.len() >= 2).then(|| Shard {
        length: len,
        offsets,
        bytes: pattern.to_vec(),
    })
}

/// True if no position in `[pos, pos + len)` carries a unique symbol.
fn tree_allows(tree: &SuffixTree, pos: usize, len: usize) -> bool {
    tree.text[pos..pos + len].iter().all(|&s| s < UNIQUE_BASE)
}

/// Instruction sizes in bytes. The defaults match AVR `rcall`/`rjmp`/`ret`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsaParams {
    pub call: usize,
    pub jump: usize,
    pub ret: usize,
}

impl Default for IsaParams {
    fn default() -> Self {
        Self {
            call: 2,
            jump: 2,
            ret: 2,
        }
    }
}

impl IsaParams {
    fn validate(&self) -> Result<()> {
        if self.call == 0 || self.jump == 0 || self.ret == 0 {
            return Err(ShardError::IsaSize);
        }
        Ok(())
    }

    /// `c L - (L + ret) - c (call + jump)`.
    pub fn freed_bytes(&self, occurrences: usize, length: usize) -> i64 {
        let c = occurrences as i64;
        let l = length as i64;
        c * l - (l + self.ret as i64) - c * (self.call + self.jump) as i64
    }

    fn encode_call(&self, pc: usize, target: usize) -> Vec<u8> {
        encode_branch(self.call, 0xD0, 0xCA, pc, target)
    }

    fn encode_jump(&self, pc: usize, target: usize) -> Vec<u8> {
        encode_branch(self.jump, 0xC0, 0xCB, pc, target)
    }

    fn encode_ret(&self) -> Vec<u8> {
        if self.ret == 2 {
            vec![0x08, 0x95]
        } else {
            let mut v = vec![0xFF; self.ret];
            v[0] = 0xCC;
            v
        }
    }
}

/// Two-byte branches use the AVR relative form (12-bit word offset, little
/// endian), wrapping beyond 8 KB as on small parts; other sizes an opcode
/// byte plus a little-endian absolute address.
fn encode_branch(size: usize, avr_op: u8, op: u8, pc: usize, target: usize) -> Vec<u8> {
    if size == 2 {
        let k = ((target as i64 - (pc as i64 + 2)) >> 1) as u16 & 0x0FFF;
        vec![k as u8, avr_op | (k >> 8) as u8]
    } else {
        let mut v = Vec::with_capacity(size);
        v.push(op);
        v.extend((0..size - 1).map(|i| (target >> (8 * i)) as u8));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub shard: Shard,
    /// Output offset of the subroutine body.
    pub subroutine_offset: usize,
    /// Output offset of each rewritten call site, one per occurrence.
    pub call_sites: Vec<usize>,
    pub freed: i64,
}

/// Layout of the compressed image: the code is compacted with every
/// occurrence replaced by a CALL/JUMP pair, subroutines follow in shard
/// order, and the freed bytes are left as `0x00` filler at the end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub isa: IsaParams,
    pub image_len: usize,
    pub shards: Vec<ShardPlan>,
    /// Shards dropped because they would free nothing.
    pub dropped: Vec<Shard>,
}

impl CompressionPlan {
    pub fn freed(&self) -> usize {
        self.shards.iter().map(|s| s.freed as usize).sum()
    }

    /// Output range that holds only filler after compression.
    pub fn free_region(&self) -> std::ops::Range<usize> {
        self.image_len - self.freed()..self.image_len
    }
}

pub fn plan_compression(report: &ShardReport, isa: IsaParams) -> Result<CompressionPlan> {
    isa.validate()?;
    let mut accepted = Vec::new();
    let mut dropped = Vec::new();
    for shard in &report.shards {
        if isa.freed_bytes(shard.offsets.len(), shard.length) > 0 {
            accepted.push(shard.clone());
        } else {
            dropped.push(shard.clone());
        }
    }
    let mut spans: Vec<(usize, usize, usize)> = accepted
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.offsets.iter().map(move |&o| (o, s.length, i)))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(ShardError::Overlap { a: w[0].0, b: w[1].0 });
        }
    }
    if let Some(&(o, l, _)) = spans.last() {
        if o + l > report.image_len {
            return Err(ShardError::LengthMismatch {
                plan: o + l,
                image: report.image_len,
            });
        }
    }

    let stub = isa.call + isa.jump;
    let mut call_sites = vec![Vec::new(); accepted.len()];
    let mut removed = 0usize;
    for &(o, l, i) in &spans {
        call_sites[i].push(o - removed);
        removed += l - stub;
    }
    let mut sub_offset = report.image_len - removed;
    let mut shards = Vec::with_capacity(accepted.len());
    for (shard, sites) in accepted.into_iter().zip(call_sites) {
        let freed = isa.freed_bytes(shard.offsets.len(), shard.length);
        let len = shard.length;
        shards.push(ShardPlan {
            shard,
            subroutine_offset: sub_offset,
            call_sites: sites,
            freed,
        });
        sub_offset += len + isa.ret;
    }
    Ok(CompressionPlan {
        isa,
        image_len: report.image_len,
        shards,
        dropped,
    })
}

/// Rewrites the image according to `plan`. Length is preserved.
pub fn apply_compression(image: &[u8], plan: &CompressionPlan) -> Result<Vec<u8>> {
    if image.len() != plan.image_len {
        return Err(ShardError::LengthMismatch {
            plan: plan.image_len,
            image: image.len(),
        });
    }
    let mut sites: Vec<(usize, usize)> = plan
        .shards
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.shard.offsets.iter().map(move |&o| (o, i)))
        .collect();
    sites.sort_unstable();
    let mut out = Vec::with_capacity(image.len());
    let mut pos = 0;
    for (o, i) in sites {
        let sp = &plan.shards[i];
        if image.get(o..o + sp.shard.length) != Some(&sp.shard.bytes[..]) {
            return Err(ShardError::ContentMismatch(o));
        }
        out.extend_from_slice(&image[pos..o]);
        let pc = out.len();
        out.extend(plan.isa.encode_call(pc, sp.subroutine_offset));
        let after = pc + plan.isa.call + plan.isa.jump;
        out.extend(plan.isa.encode_jump(pc + plan.isa.call, after));
        pos = o + sp.shard.length;
    }
    out.extend_from_slice(&image[pos..]);
    for sp in &plan.shards {
        debug_assert_eq!(out.len(), sp.subroutine_offset);
        out.extend_from_slice(&sp.shard.bytes);
        out.extend(plan.isa.encode_ret());
    }
    out.resize(image.len(), 0x00);
    Ok(out)
}

/// One line per shard: `length=<L> offsets=<o1,o2,..> freed=<bytes>`.
pub fn report_lines(report: &ShardReport, isa: &IsaParams) -> String {
    report
        .shards
        .iter()
        .map(|s| {
            let offs: Vec<String> = s.offsets.iter().map(|o| o.to_string()).collect();
            format!(
                "length={} offsets={} freed={}\n",
                s.length,
                offs.join(","),
                isa.freed_bytes(s.offsets.len(), s.length)
            )
        })
        .collect()
}

/// Brute-force longest repeated substring, earliest start on ties. Quadratic
/// in memory-free form: compares every pair of suffixes.
pub fn brute_force_longest_repeat(data: &[u8]) -> Option<Shard> {
    let n = data.len();
    let mut best_len = 0;
    let mut best_start = 0;
    for i in 0..n {
        for j in i + 1..n {
            let l = data[i..].iter().zip(&data[j..]).take_while(|(a, b)| a == b).count();
            if l > best_len || (l == best_len && l > 0 && i < best_start) {
                best_len = l;
                best_start = i;
            }
        }
    }
    if best_len == 0 {
        return None;
    }
    let pat = &data[best_start..best_start + best_len];
    let offsets = (0..=n - best_len).filter(|&k| &data[k..k + best_len] == pat).collect();
    Some(Shard {
        length: best_len,
        offsets,
        bytes: pat.to_vec(),
    })
}
