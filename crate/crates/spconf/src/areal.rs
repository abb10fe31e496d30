//! Areal adjacency graphs, the intrinsic CAR precision matrix they induce,
//! and the low-frequency eigenstructure used by RSR and spatial+.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{fix_sign, sym_eigen_sorted};

/// Undirected adjacency structure over `n` small areas.
///
/// Areas are indexed `0..n` internally; file formats are 1-based. The edge
/// set holds each unordered pair once with `a < b`, and `components` is the
/// connected-component partition, each component sorted, components ordered
/// by smallest member.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    components: Vec<Vec<usize>>,
}

impl AreaGraph {
    /// Build a graph from unordered 0-based index pairs.
    pub fn new(n: usize, raw_edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("graph needs at least one area"));
        }
        let mut edges = Vec::with_capacity(raw_edges.len());
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in raw_edges {
            if a >= n || b >= n {
                return Err(Error::validation(format!(
                    "edge ({}, {}) out of range for n={}",
                    a + 1,
                    b + 1,
                    n
                )));
            }
            if a == b {
                return Err(Error::validation(format!("self-edge at area {}", a + 1)));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::validation(format!(
                    "duplicate edge ({}, {})",
                    key.0 + 1,
                    key.1 + 1
                )));
            }
            edges.push(key);
        }
        edges.sort_unstable();
        let components = connected_components(n, &edges);
        Ok(AreaGraph {
            n,
            edges,
            components,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn is_connected(&self) -> bool {
        self.components.len() == 1
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.n];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Neighbour lists, each sorted ascending.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            nb[a].push(b);
            nb[b].push(a);
        }
        for list in nb.iter_mut() {
            list.sort_unstable();
        }
        nb
    }

    /// Serialize in the edge-list format (`n=<count>` header, one 1-based
    /// pair per line).
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("n={}\n", self.n);
        for &(a, b) in &self.edges {
            out.push_str(&format!("{} {}\n", a + 1, b + 1));
        }
        out
    }

    /// Serialize as a GAL neighbour file.
    pub fn to_gal(&self, name: &str) -> String {
        let nb = self.neighbours();
        let mut out = format!("0 {} {} {}\n", self.n, name, name);
        for (i, list) in nb.iter().enumerate() {
            out.push_str(&format!("{} {}\n", i + 1, list.len()));
            let ids: Vec<String> = list.iter().map(|j| (j + 1).to_string()).collect();
            out.push_str(&ids.join(" "));
            out.push('\n');
        }
        out
    }
}

fn connected_components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Parse the edge-list format: header `n=<count>`, then one 1-based
/// whitespace-separated pair per line. Blank lines and `#` comments are
/// skipped.
pub fn parse_edge_list(text: &str) -> Result<AreaGraph> {
    let mut n: Option<usize> = None;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if n.is_none() {
            let rest = line
                .strip_prefix("n=")
                .ok_or_else(|| Error::parse(lineno, "expected header \"n=<count>\""))?;
            let count: usize = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("invalid area count {rest:?}")))?;
            n = Some(count);
            continue;
        }
        let mut it = line.split_whitespace();
        let a: usize = it
            .next()
            .ok_or_else(|| Error::parse(lineno, "missing first index"))?
            .parse()
            .map_err(|_| Error::parse(lineno, format!("invalid index in {line:?}")))?;
        let b: usize = it
            .next()
            .ok_or_else(|| Error::parse(lineno, "missing second index"))?
            .parse()
            .map_err(|_| Error::parse(lineno, format!("invalid index in {line:?}")))?;
        if it.next().is_some() {
            return Err(Error::parse(lineno, format!("trailing tokens in {line:?}")));
        }
        if a == 0 || b == 0 {
            return Err(Error::parse(lineno, "indices are 1-based"));
        }
        edges.push((a - 1, b - 1));
    }
    let n = n.ok_or_else(|| Error::parse(0, "empty edge-list file"))?;
    AreaGraph::new(n, &edges)
}

/// Parse a GeoDa GAL neighbour file: header `0 n <name> <name>` (the leading
/// `0` is optional), then per area an `id degree` line followed by a line of
/// neighbour ids. Asymmetric neighbour relations are rejected.
pub fn parse_gal(text: &str) -> Result<AreaGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(0, "empty GAL file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    let n: usize = match toks.len() {
        1 => toks[0]
            .parse()
            .map_err(|_| Error::parse(hline, "invalid GAL header count"))?,
        _ => toks[1]
            .parse()
            .map_err(|_| Error::parse(hline, "invalid GAL header count"))?,
    };
    if n == 0 {
        return Err(Error::parse(hline, "GAL header declares zero areas"));
    }

    let mut lists: Vec<Option<Vec<usize>>> = vec![None; n];
    for _ in 0..n {
        let (l1, head) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "unexpected end of GAL file"))?;
        let mut it = head.split_whitespace();
        let id: usize = it
            .next()
            .ok_or_else(|| Error::parse(l1, "missing area id"))?
            .parse()
            .map_err(|_| Error::parse(l1, format!("invalid area id in {head:?}")))?;
        let deg: usize = it
            .next()
            .ok_or_else(|| Error::parse(l1, "missing neighbour count"))?
            .parse()
            .map_err(|_| Error::parse(l1, format!("invalid neighbour count in {head:?}")))?;
        if id == 0 || id > n {
            return Err(Error::parse(l1, format!("area id {id} out of range 1..{n}")));
        }
        if lists[id - 1].is_some() {
            return Err(Error::parse(l1, format!("area {id} listed twice")));
        }
        let mut nbrs = Vec::with_capacity(deg);
        if deg > 0 {
            let (l2, body) = lines
                .next()
                .ok_or_else(|| Error::parse(l1, "missing neighbour line"))?;
            for tok in body.split_whitespace() {
                let j: usize = tok
                    .parse()
                    .map_err(|_| Error::parse(l2, format!("invalid neighbour id {tok:?}")))?;
                if j == 0 || j > n {
                    return Err(Error::parse(
                        l2,
                        format!("neighbour id {j} out of range 1..{n}"),
                    ));
                }
                if j == id {
                    return Err(Error::parse(l2, format!("area {id} neighbours itself")));
                }
                nbrs.push(j - 1);
            }
            if nbrs.len() != deg {
                return Err(Error::parse(
                    l2,
                    format!(
                        "area {id} declares {deg} neighbours but lists {}",
                        nbrs.len()
                    ),
                ));
            }
        }
        lists[id - 1] = Some(nbrs);
    }

    let lists: Vec<Vec<usize>> = lists
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::validation(format!("area {} missing", i + 1))))
        .collect::<Result<_>>()?;

    // Symmetry check, then collapse the doubly-listed relation to edges.
    let mut edges = Vec::new();
    for (i, nbrs) in lists.iter().enumerate() {
        for &j in nbrs {
            if !lists[j].contains(&i) {
                return Err(Error::validation(format!(
                    "asymmetric GAL file: {} lists {} but not vice versa",
                    i + 1,
                    j + 1
                )));
            }
            if i < j {
                edges.push((i, j));
            }
        }
    }
    AreaGraph::new(n, &edges)
}

/// Load a neighbour file, sniffing between the edge-list format (header
/// starts with `n=`) and GAL.
pub fn load_graph(text: &str) -> Result<AreaGraph> {
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if first.starts_with("n=") {
        parse_edge_list(text)
    } else {
        parse_gal(text)
    }
}

/// Rook-adjacency lattice with `rows * cols` areas, indexed row-major.
pub fn lattice_graph(rows: usize, cols: usize) -> Result<AreaGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::validation("lattice dimensions must be positive"));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((idx(r, c), idx(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((idx(r, c), idx(r + 1, c)));
            }
        }
    }
    AreaGraph::new(rows * cols, &edges)
}

/// Centroids of a rook lattice in row-major order: (column, row) pairs.
pub fn lattice_centroids(rows: usize, cols: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((c as f64, r as f64));
        }
    }
    out
}

/// Precision matrix of the intrinsic CAR prior: graph Laplacian entries
/// (degree on the diagonal, -1 on edges), with structural rank
/// `n - n_components`.
#[derive(Debug, Clone)]
pub struct IcarPrecision {
    q: DMatrix<f64>,
    degrees: Vec<usize>,
    edges: Vec<(usize, usize)>,
    components: Vec<Vec<usize>>,
    rank: usize,
}

impl IcarPrecision {
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Quadratic form `x' Q x`, evaluated edge-wise so it is exact for the
    /// Laplacian structure and never goes negative from cancellation.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(a, b)| {
                let d = x[a] - x[b];
                d * d
            })
            .sum()
    }
}

/// Assemble the ICAR precision matrix of a graph.
pub fn icar_precision(g: &AreaGraph) -> IcarPrecision {
    let n = g.n();
    let degrees = g.degrees();
    let mut q = DMatrix::zeros(n, n);
    for (i, &d) in degrees.iter().enumerate() {
        q[(i, i)] = d as f64;
    }
    for &(a, b) in g.edges() {
        q[(a, b)] = -1.0;
        q[(b, a)] = -1.0;
    }
    IcarPrecision {
        q,
        degrees,
        edges: g.edges().to_vec(),
        components: g.components().to_vec(),
        rank: n - g.n_components(),
    }
}

/// Eigenvectors of `Q` for the `k` smallest strictly positive eigenvalues,
/// columns orthonormal, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub null_dim: usize,
}

impl SpectralBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Restrict to the first `k` columns (the lowest frequencies).
    pub fn truncate(&self, k: usize) -> Result<SpectralBasis> {
        if k > self.k() {
            return Err(Error::validation(format!(
                "cannot truncate basis of {} vectors to {}",
                self.k(),
                k
            )));
        }
        Ok(SpectralBasis {
            eigenvalues: self.eigenvalues[..k].to_vec(),
            vectors: self.vectors.columns(0, k).into_owned(),
            null_dim: self.null_dim,
        })
    }
}

/// Relative threshold below which an eigenvalue counts as null.
const NULL_EIGENVALUE_REL: f64 = 1e-9;

/// Extract the `k` eigenvectors of the ICAR precision with the smallest
/// non-null eigenvalues.
///
/// Eigenvalues are sorted ascending with a stable order and each vector has
/// a deterministic sign (first non-negligible entry positive), so repeated
/// runs produce the same basis.
pub fn eigen_lowest_nonnull(qp: &IcarPrecision, k: usize) -> Result<SpectralBasis> {
    if k > qp.rank() {
        return Err(Error::validation(format!(
            "requested {} eigenvectors but rank is {}",
            k,
            qp.rank()
        )));
    }
    let n = qp.n();
    let (vals, vecs) = sym_eigen_sorted(qp.q());
    let lambda_max = vals.last().copied().unwrap_or(0.0).max(0.0);
    let thresh = NULL_EIGENVALUE_REL * lambda_max;
    let null_dim = vals.iter().filter(|&&v| v < thresh).count();
    debug_assert_eq!(null_dim, qp.n_components());
    let mut eigenvalues = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    for j in 0..k {
        eigenvalues.push(vals[null_dim + j]);
        let mut col: Vec<f64> = vecs.column(null_dim + j).iter().copied().collect();
        fix_sign(&mut col);
        for (i, v) in col.iter().enumerate() {
            vectors[(i, j)] = *v;
        }
    }
    Ok(SpectralBasis {
        eigenvalues,
        vectors,
        null_dim,
    })
}
