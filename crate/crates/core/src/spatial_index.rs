//! Region quadtree over stock points with per-node stock totals.
//!
//! Potential evaluation walks the tree depth-first, visiting children nearest
//! first. Each subtree has a bound `total_stock · f(d_min)` on what it could
//! add; `f` is non-increasing and `d_min` is a lower bound on the distance to
//! anything in the node. A subtree is dropped when its bound, added to the
//! bounds of everything dropped before it, is at most `ε·Φ_acc·s`, where
//! `Φ_acc` is the potential accumulated so far and `s` the share of the total
//! stock already summed or dropped (this subtree included). The total loss is
//! therefore at most `ε·Φ`. Tying the allowance to `s` keeps a few early drops
//! from using it all up.
//!
//! Pruned subtrees contribute nothing; there is no centroid approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{lon_separation, DistanceProvider, GeoBox, GeoPoint, PointTrig, SphereModel, TrigCache};
use crate::kernels::Kernel;

pub const DEFAULT_LEAF_CAPACITY: usize = 8;
pub const MAX_DEPTH: usize = 24;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Slack subtracted from the minimum-distance bound so rounding in `acos`
/// never lifts it above a true distance.
const MIN_DISTANCE_SLACK_KM: f64 = 1e-6;

/// One territorial unit: its representative point and its stocks, one value
/// per dataset variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockPoint {
    pub id: String,
    pub location: GeoPoint,
    pub stocks: Vec<f64>,
}

/// Pruning threshold. `epsilon = 0` or `enabled = false` means exact summation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffPolicy {
    pub epsilon: f64,
    pub enabled: bool,
}

impl CutoffPolicy {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be a non-negative number, got {epsilon}"
            )));
        }
        Ok(Self {
            epsilon,
            enabled: true,
        })
    }

    pub fn exact() -> Self {
        Self {
            epsilon: 0.0,
            enabled: false,
        }
    }

    #[inline]
    pub fn is_active(&self) -> bool {
        self.enabled && self.epsilon > 0.0
    }
}

impl Default for CutoffPolicy {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            enabled: true,
        }
    }
}

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    /// Children in NW, NE, SW, SE order; empty quadrants are `None`.
    Internal([Option<NodeId>; 4]),
    /// Range into the tree's entry array.
    Leaf { start: u32, end: u32 },
}

/// Bounds of a node in radians with the latitude trig the distance bound needs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RadBox {
    west: f64,
    east: f64,
    south: f64,
    north: f64,
    sin_south: f64,
    cos_south: f64,
    sin_north: f64,
    cos_north: f64,
}

impl RadBox {
    fn new(b: &GeoBox) -> Self {
        let south = b.south.to_radians();
        let north = b.north.to_radians();
        Self {
            west: b.west.to_radians(),
            east: b.east.to_radians(),
            south,
            north,
            sin_south: south.sin(),
            cos_south: south.cos(),
            sin_north: north.sin(),
            cos_north: north.cos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadNode {
    pub bbox: GeoBox,
    pub total_stock: f64,
    /// Stock-weighted mean location; the box center when the node holds no stock.
    pub centroid: (f64, f64),
    pub depth: u32,
    pub kind: NodeKind,
    rad: RadBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafEntry {
    pub point: u32,
    pub stock: f64,
}

/// Immutable quadtree over one stock variable.
#[derive(Debug, Clone)]
pub struct QuadTree {
    nodes: Vec<QuadNode>,
    entries: Vec<LeafEntry>,
    locations: Vec<GeoPoint>,
    leaf_capacity: usize,
}

/// A point at which the potential is evaluated.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub location: GeoPoint,
    pub trig: PointTrig,
    lat_rad: f64,
}

impl Probe {
    pub fn new(location: GeoPoint) -> Self {
        Self {
            location,
            trig: PointTrig::new(location),
            lat_rad: location.lat().to_radians(),
        }
    }
}

/// Builds a quadtree over `points` for the variable at `variable` in each
/// point's stock vector.
pub fn build_quadtree(points: &[StockPoint], variable: usize, leaf_capacity: usize) -> Result<QuadTree> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut stocks = Vec::with_capacity(points.len());
    for p in points {
        let s = *p
            .stocks
            .get(variable)
            .ok_or_else(|| Error::UnknownVariable(format!("#{variable}")))?;
        stocks.push(s);
    }
    let locations: Vec<GeoPoint> = points.iter().map(|p| p.location).collect();
    QuadTree::build(&locations, &stocks, leaf_capacity)
}

impl QuadTree {
    pub fn build(locations: &[GeoPoint], stocks: &[f64], leaf_capacity: usize) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if locations.len() != stocks.len() {
            return Err(Error::InvalidParameter(format!(
                "{} locations but {} stock values",
                locations.len(),
                stocks.len()
            )));
        }
        if leaf_capacity == 0 {
            return Err(Error::InvalidParameter("leaf capacity must be at least 1".into()));
        }
        if locations.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter("too many points".into()));
        }
        if let Some((i, s)) = stocks.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "stock of point {i} must be finite and non-negative, got {s}"
            )));
        }
        let bbox = GeoBox::enclosing(locations.iter().copied()).expect("nonempty");
        let mut tree = QuadTree {
            nodes: Vec::new(),
            entries: Vec::with_capacity(locations.len()),
            locations: locations.to_vec(),
            leaf_capacity,
        };
        let mut order: Vec<u32> = (0..locations.len() as u32).collect();
        tree.build_node(&mut order, bbox, 0, stocks);
        Ok(tree)
    }

    fn build_node(&mut self, idx: &mut [u32], bbox: GeoBox, depth: u32, stocks: &[f64]) -> NodeId {
        let id = self.nodes.len() as NodeId;
        // Distance bounds use the points' own extent, which is never looser than the cell.
        let extent = GeoBox::enclosing(idx.iter().map(|&i| self.locations[i as usize])).unwrap_or(bbox);
        self.nodes.push(QuadNode {
            bbox,
            total_stock: 0.0,
            centroid: (0.0, 0.0),
            depth,
            kind: NodeKind::Leaf { start: 0, end: 0 },
            rad: RadBox::new(&extent),
        });

        if idx.len() <= self.leaf_capacity || depth as usize >= MAX_DEPTH {
            let start = self.entries.len() as u32;
            let (mut total, mut wlat, mut wlon) = (0.0, 0.0, 0.0);
            for &i in idx.iter() {
                let s = stocks[i as usize];
                let loc = self.locations[i as usize];
                total += s;
                wlat += s * loc.lat();
                wlon += s * loc.lon();
                self.entries.push(LeafEntry { point: i, stock: s });
            }
            let node = &mut self.nodes[id as usize];
            node.kind = NodeKind::Leaf {
                start,
                end: self.entries.len() as u32,
            };
            node.total_stock = total;
            node.centroid = centroid_or_center(total, wlat, wlon, &bbox);
            return id;
        }

        let mid_lat = 0.5 * (bbox.south + bbox.north);
        let mid_lon = 0.5 * (bbox.west + bbox.east);
        let quadrant = |p: GeoPoint| -> usize {
            let south = (p.lat() < mid_lat) as usize;
            let east = (p.lon() >= mid_lon) as usize;
            south * 2 + east
        };
        idx.sort_by_key(|&i| quadrant(self.locations[i as usize]));
        let child_boxes = [
            GeoBox { west: bbox.west, south: mid_lat, east: mid_lon, north: bbox.north },
            GeoBox { west: mid_lon, south: mid_lat, east: bbox.east, north: bbox.north },
            GeoBox { west: bbox.west, south: bbox.south, east: mid_lon, north: mid_lat },
            GeoBox { west: mid_lon, south: bbox.south, east: bbox.east, north: mid_lat },
        ];

        let mut children = [None; 4];
        let mut rest = idx;
        for q in 0..4 {
            let n = rest.iter().take_while(|&&i| quadrant(self.locations[i as usize]) == q).count();
            let (head, tail) = rest.split_at_mut(n);
            rest = tail;
            if !head.is_empty() {
                children[q] = Some(self.build_node(head, child_boxes[q], depth + 1, stocks));
            }
        }

        let (mut total, mut wlat, mut wlon) = (0.0, 0.0, 0.0);
        for c in children.iter().flatten() {
            let child = &self.nodes[*c as usize];
            total += child.total_stock;
            wlat += child.total_stock * child.centroid.0;
            wlon += child.total_stock * child.centroid.1;
        }
        let node = &mut self.nodes[id as usize];
        node.kind = NodeKind::Internal(children);
        node.total_stock = total;
        node.centroid = centroid_or_center(total, wlat, wlon, &bbox);
        id
    }

    pub fn root(&self) -> &QuadNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &QuadNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[QuadNode] {
        &self.nodes
    }

    pub fn entries(&self) -> &[LeafEntry] {
        &self.entries
    }

    pub fn locations(&self) -> &[GeoPoint] {
        &self.locations
    }

    pub fn leaf_capacity(&self) -> usize {
        self.leaf_capacity
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    /// Entries stored under `id`, in storage order.
    pub fn subtree_entries(&self, id: NodeId) -> Vec<LeafEntry> {
        let mut out = Vec::new();
        self.collect_entries(id, &mut out);
        out
    }

    fn collect_entries(&self, id: NodeId, out: &mut Vec<LeafEntry>) {
        match self.nodes[id as usize].kind {
            NodeKind::Leaf { start, end } => out.extend_from_slice(&self.entries[start as usize..end as usize]),
            NodeKind::Internal(children) => {
                for c in children.iter().flatten() {
                    self.collect_entries(*c, out);
                }
            }
        }
    }
}

fn centroid_or_center(total: f64, wlat: f64, wlon: f64, bbox: &GeoBox) -> (f64, f64) {
    if total > 0.0 {
        (wlat / total, wlon / total)
    } else {
        (0.5 * (bbox.south + bbox.north), 0.5 * (bbox.west + bbox.east))
    }
}

/// Lower bound on the great-circle distance from `m` to anything in `node`.
pub fn min_distance_to_node(m: &Probe, node: &QuadNode, sphere: SphereModel) -> f64 {
    min_distance_to_box(m, &node.rad, sphere)
}

#[inline]
fn min_distance_to_box(m: &Probe, b: &RadBox, sphere: SphereModel) -> f64 {
    let lon = m.trig.lon_rad;
    let lat = m.lat_rad;
    let lon_inside = lon >= b.west && lon <= b.east;
    if lon_inside && lat >= b.south && lat <= b.north {
        return 0.0;
    }
    let gap = if lon_inside {
        0.0
    } else {
        lon_separation(lon, b.west).min(lon_separation(lon, b.east))
    };
    // For a point at latitude φ in the box, cos(angle) is at most
    // A·sin φ + B·cos φ; maximize that over [south, north].
    let a = m.trig.sin_lat;
    let bcoef = m.trig.cos_lat * gap.cos();
    let peak = a.atan2(bcoef);
    let best = if peak >= b.south && peak <= b.north {
        a.hypot(bcoef)
    } else {
        (a * b.sin_south + bcoef * b.cos_south).max(a * b.sin_north + bcoef * b.cos_north)
    };
    let d = sphere.radius_km() * best.clamp(-1.0, 1.0).acos();
    (d - MIN_DISTANCE_SLACK_KM).max(0.0)
}

/// Hooks into a traversal; the unit type ignores everything.
pub trait TraversalObserver {
    fn visited_point(&mut self, _point: u32, _contribution: f64) {}
    fn pruned(&mut self, _node: NodeId, _bound: f64, _accumulated: f64) {}
}

impl TraversalObserver for () {}

/// Potential at `m` from the tree's stocks.
pub fn evaluate_potential<D: DistanceProvider>(
    m: &Probe,
    tree: &QuadTree,
    kernel: &Kernel,
    policy: &CutoffPolicy,
    dist: &D,
    sphere: SphereModel,
) -> f64 {
    evaluate_potential_observed(m, tree, kernel, policy, dist, sphere, &mut ())
}

pub fn evaluate_potential_observed<D: DistanceProvider, O: TraversalObserver>(
    m: &Probe,
    tree: &QuadTree,
    kernel: &Kernel,
    policy: &CutoffPolicy,
    dist: &D,
    sphere: SphereModel,
    observer: &mut O,
) -> f64 {
    let mut walk = Walk {
        tree,
        kernel,
        dist,
        probe: m,
        sphere,
        active: policy.is_active(),
        epsilon: policy.epsilon,
        acc: 0.0,
        spent: 0.0,
        settled_stock: 0.0,
        total_stock: tree.nodes[0].total_stock,
        observer,
    };
    walk.visit(0);
    walk.acc
}

struct Walk<'a, D, O> {
    tree: &'a QuadTree,
    kernel: &'a Kernel,
    dist: &'a D,
    probe: &'a Probe,
    sphere: SphereModel,
    active: bool,
    epsilon: f64,
    acc: f64,
    /// Sum of the bounds of every subtree skipped so far.
    spent: f64,
    /// Stock already summed or skipped. Each unit of stock unlocks at most
    /// `ε·acc/total_stock` of loss, so the loss stays under `ε·Φ`.
    settled_stock: f64,
    total_stock: f64,
    observer: &'a mut O,
}

impl<D: DistanceProvider, O: TraversalObserver> Walk<'_, D, O> {
    fn visit(&mut self, id: NodeId) {
        match self.tree.nodes[id as usize].kind {
            NodeKind::Leaf { start, end } => {
                for e in &self.tree.entries[start as usize..end as usize] {
                    let d = self.dist.distance_km(e.point as usize, &self.probe.trig);
                    let c = e.stock * self.kernel.eval(d);
                    self.acc += c;
                    self.observer.visited_point(e.point, c);
                }
                self.settled_stock += self.tree.nodes[id as usize].total_stock;
            }
            NodeKind::Internal(children) => {
                let mut order = [(0.0f64, 0 as NodeId); 4];
                let mut n = 0;
                for c in children.iter().flatten() {
                    let node = &self.tree.nodes[*c as usize];
                    order[n] = (min_distance_to_box(self.probe, &node.rad, self.sphere), *c);
                    n += 1;
                }
                let order = &mut order[..n];
                // insertion sort keeps ties in quadrant order
                for i in 1..n {
                    let mut j = i;
                    while j > 0 && order[j - 1].0 > order[j].0 {
                        order.swap(j - 1, j);
                        j -= 1;
                    }
                }
                for &(dmin, c) in order.iter() {
                    if self.active {
                        let stock = self.tree.nodes[c as usize].total_stock;
                        let bound = stock * self.kernel.eval(dmin);
                        // the allowance grows with the stock share settled, so it cannot run dry early
                        let share = (self.settled_stock + stock) / self.total_stock;
                        // a zero bound discards nothing, even before anything accumulated
                        if bound == 0.0 || (self.acc > 0.0 && self.spent + bound <= self.epsilon * self.acc * share) {
                            self.spent += bound;
                            self.settled_stock += stock;
                            self.observer.pruned(c, bound, self.acc);
                            continue;
                        }
                    }
                    self.visit(c);
                }
            }
        }
    }
}

/// One pruning decision recorded by [`evaluate_potential_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecord {
    pub node: NodeId,
    pub bound: f64,
    pub accumulated: f64,
    /// Exact contribution of the dropped subtree.
    pub discarded: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracedEvaluation {
    pub value: f64,
    pub prunes: Vec<PruneRecord>,
    /// Points in the order they were summed.
    pub visit_order: Vec<u32>,
    /// Running potential after each summed point.
    pub running: Vec<f64>,
}

impl TracedEvaluation {
    pub fn total_discarded(&self) -> f64 {
        self.prunes.iter().map(|p| p.discarded).sum()
    }
}

#[derive(Default)]
struct Recorder {
    prunes: Vec<(NodeId, f64, f64)>,
    order: Vec<u32>,
    running: Vec<f64>,
    acc: f64,
}

impl TraversalObserver for Recorder {
    fn visited_point(&mut self, point: u32, contribution: f64) {
        self.acc += contribution;
        self.order.push(point);
        self.running.push(self.acc);
    }

    fn pruned(&mut self, node: NodeId, bound: f64, accumulated: f64) {
        self.prunes.push((node, bound, accumulated));
    }
}

/// Evaluates like [`evaluate_potential`] and also computes what every prune
/// threw away.
pub fn evaluate_potential_traced<D: DistanceProvider>(
    m: &Probe,
    tree: &QuadTree,
    kernel: &Kernel,
    policy: &CutoffPolicy,
    dist: &D,
    sphere: SphereModel,
) -> TracedEvaluation {
    let mut rec = Recorder::default();
    let value = evaluate_potential_observed(m, tree, kernel, policy, dist, sphere, &mut rec);
    let prunes = rec
        .prunes
        .iter()
        .map(|&(node, bound, accumulated)| PruneRecord {
            node,
            bound,
            accumulated,
            discarded: tree
                .subtree_entries(node)
                .iter()
                .map(|e| e.stock * kernel.eval(dist.distance_km(e.point as usize, &m.trig)))
                .sum(),
        })
        .collect();
    TracedEvaluation {
        value,
        prunes,
        visit_order: rec.order,
        running: rec.running,
    }
}

/// For every location, the great-circle distance to its nearest other
/// location (0 for coincident duplicates). Single-point input yields `[inf]`.
pub fn nearest_neighbor_distances(locations: &[GeoPoint], sphere: SphereModel) -> Result<Vec<f64>> {
    let zeros = vec![0.0; locations.len()];
    let tree = QuadTree::build(locations, &zeros, DEFAULT_LEAF_CAPACITY)?;
    let cache = TrigCache::exact(locations, sphere);
    Ok(locations
        .iter()
        .enumerate()
        .map(|(i, &loc)| {
            let probe = Probe::new(loc);
            let mut best = f64::INFINITY;
            nn_visit(&tree, &cache, &probe, i as u32, 0, sphere, &mut best);
            best
        })
        .collect())
}

fn nn_visit(
    tree: &QuadTree,
    cache: &TrigCache,
    probe: &Probe,
    skip: u32,
    id: NodeId,
    sphere: SphereModel,
    best: &mut f64,
) {
    match tree.nodes[id as usize].kind {
        NodeKind::Leaf { start, end } => {
            for e in &tree.entries[start as usize..end as usize] {
                if e.point != skip {
                    *best = best.min(cache.distance_km(e.point as usize, &probe.trig));
                }
            }
        }
        NodeKind::Internal(children) => {
            let mut order: Vec<(f64, NodeId)> = children
                .iter()
                .flatten()
                .map(|&c| (min_distance_to_box(probe, &tree.nodes[c as usize].rad, sphere), c))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (d, c) in order {
                if d < *best {
                    nn_visit(tree, cache, probe, skip, c, sphere, best);
                }
            }
        }
    }
}
