//! Classical quantisers: MedianCut, Floyd–Steinberg error diffusion and an
//! octree quantiser.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colour::{to_byte, RgbImage};
use crate::cqformer::{IndexMap, Palette};
use crate::error::{config_err, Error, Result};

fn check_colours(c: usize) -> Result<()> {
    if c == 0 {
        return Err(config_err("colour count must be at least 1"));
    }
    Ok(())
}

/// A MedianCut box: pixel indices plus per-channel bounds.
#[derive(Debug, Clone)]
pub struct ColourBox {
    pub members: Vec<usize>,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ColourBox {
    fn new(members: Vec<usize>, px: &[[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &members {
            for k in 0..3 {
                min[k] = min[k].min(px[i][k]);
                max[k] = max[k].max(px[i][k]);
            }
        }
        Self { members, min, max }
    }

    /// Widest channel and its range; ties prefer R, then G, then B.
    fn widest(&self) -> (usize, f64) {
        let mut best = (0, self.max[0] - self.min[0]);
        for k in 1..3 {
            let r = self.max[k] - self.min[k];
            if r > best.1 {
                best = (k, r);
            }
        }
        best
    }

    fn mean(&self, px: &[[f64; 3]]) -> [f64; 3] {
        let mut acc = MeanAccumulator::default();
        for &i in &self.members {
            acc.push(px[i]);
        }
        acc.mean()
    }
}

/// Running mean kept as offsets from the first sample, so a set of
/// identical colours averages to exactly that colour.
#[derive(Debug, Clone, Copy, Default)]
struct MeanAccumulator {
    origin: [f64; 3],
    offset: [f64; 3],
    count: usize,
}

impl MeanAccumulator {
    fn push(&mut self, x: [f64; 3]) {
        if self.count == 0 {
            self.origin = x;
        }
        for k in 0..3 {
            self.offset[k] += x[k] - self.origin[k];
        }
        self.count += 1;
    }

    fn merge(&mut self, other: &MeanAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        for k in 0..3 {
            self.offset[k] += other.offset[k] + (other.origin[k] - self.origin[k]) * other.count as f64;
        }
        self.count += other.count;
    }

    fn mean(&self) -> [f64; 3] {
        std::array::from_fn(|k| (self.origin[k] + self.offset[k] / self.count as f64).clamp(0.0, 1.0))
    }
}

/// Recursive median split until `c` boxes exist or no box holds more than
/// one distinct colour.
pub fn median_cut(img: &RgbImage, c: usize) -> Result<(Palette, IndexMap)> {
    check_colours(c)?;
    let px: Vec<[f64; 3]> = img.pixels().collect();
    let mut boxes = vec![ColourBox::new((0..px.len()).collect(), &px)];
    while boxes.len() < c {
        // Box with the largest channel range; earliest box on ties.
        let mut pick: Option<(usize, usize, f64)> = None;
        for (b, bx) in boxes.iter().enumerate() {
            let (ch, range) = bx.widest();
            if range > 0.0 && pick.is_none_or(|(_, _, r)| range > r) {
                pick = Some((b, ch, range));
            }
        }
        let Some((b, ch, _)) = pick else { break };
        let mut members = std::mem::take(&mut boxes[b].members);
        members.sort_by(|&i, &j| px[i][ch].total_cmp(&px[j][ch]));
        let median = px[members[(members.len() - 1) / 2]][ch];
        // Lower median goes left; equal values stay together so identical
        // colours never straddle two boxes.
        let mut split = members.partition_point(|&i| px[i][ch] <= median);
        if split == members.len() {
            split = members.partition_point(|&i| px[i][ch] < median);
        }
        let right = members.split_off(split);
        boxes[b] = ColourBox::new(members, &px);
        boxes.insert(b + 1, ColourBox::new(right, &px));
    }
    let mut index = vec![0; px.len()];
    let mut colours = Vec::with_capacity(boxes.len());
    for (k, bx) in boxes.iter().enumerate() {
        colours.push(bx.mean(&px));
        for &i in &bx.members {
            index[i] = k;
        }
    }
    let n = colours.len();
    Ok((Palette::new(colours)?, IndexMap::new(img.height(), img.width(), n, index)?))
}

/// Floyd–Steinberg error diffusion onto `palette`, scanning left to right,
/// top to bottom. Accumulated values are clamped to `[0, 1]`.
pub fn floyd_steinberg_dither(img: &RgbImage, palette: &Palette) -> Result<IndexMap> {
    if palette.is_empty() {
        return Err(config_err("dithering needs a non-empty palette"));
    }
    let (h, w) = (img.height(), img.width());
    let mut buf: Vec<[f64; 3]> = img.pixels().collect();
    let mut index = vec![0; h * w];
    let diffuse = |buf: &mut Vec<[f64; 3]>, r: usize, c: isize, err: [f64; 3], weight: f64| {
        if r < h && c >= 0 && (c as usize) < w {
            let p = &mut buf[r * w + c as usize];
            for k in 0..3 {
                p[k] = (p[k] + err[k] * weight).clamp(0.0, 1.0);
            }
        }
    };
    for r in 0..h {
        for c in 0..w {
            let old = buf[r * w + c];
            let k = palette.nearest(old);
            index[r * w + c] = k;
            let new = palette.colours[k];
            let err = [old[0] - new[0], old[1] - new[1], old[2] - new[2]];
            if err == [0.0; 3] {
                continue;
            }
            let c = c as isize;
            diffuse(&mut buf, r, c + 1, err, 7.0 / 16.0);
            diffuse(&mut buf, r + 1, c - 1, err, 3.0 / 16.0);
            diffuse(&mut buf, r + 1, c, err, 5.0 / 16.0);
            diffuse(&mut buf, r + 1, c + 1, err, 1.0 / 16.0);
        }
    }
    IndexMap::new(h, w, palette.len(), index)
}

/// MedianCut palette followed by Floyd–Steinberg dithering.
pub fn median_cut_dither(img: &RgbImage, c: usize) -> Result<(Palette, IndexMap)> {
    let (palette, _) = median_cut(img, c)?;
    let index = floyd_steinberg_dither(img, &palette)?;
    Ok((palette, index))
}

#[derive(Debug, Clone)]
pub struct OctreeNode {
    pub depth: u8,
    pub children: [Option<usize>; 8],
    pub count: usize,
    mean: MeanAccumulator,
    leaf: bool,
}

const OCTREE_DEPTH: u8 = 8;

fn octant(bytes: [u8; 3], depth: u8) -> usize {
    let shift = 7 - depth;
    (((bytes[0] >> shift) & 1) << 2 | ((bytes[1] >> shift) & 1) << 1 | ((bytes[2] >> shift) & 1)) as usize
}

/// Depth-8 octree quantiser. Nodes whose children are all leaves are merged
/// deepest first, then least populated, then in insertion order, until at
/// most `c` leaves remain.
pub fn octree_quantise(img: &RgbImage, c: usize) -> Result<(Palette, IndexMap)> {
    check_colours(c)?;
    let mut nodes = vec![OctreeNode { depth: 0, children: [None; 8], count: 0, mean: MeanAccumulator::default(), leaf: false }];
    let mut leaves = 0usize;
    for px in img.pixels() {
        let bytes = px.map(to_byte);
        let mut at = 0;
        loop {
            let node = &mut nodes[at];
            node.count += 1;
            if node.depth == OCTREE_DEPTH {
                node.mean.push(px);
                break;
            }
            let slot = octant(bytes, node.depth);
            at = match node.children[slot] {
                Some(child) => child,
                None => {
                    let depth = node.depth + 1;
                    nodes.push(OctreeNode { depth, children: [None; 8], count: 0, mean: MeanAccumulator::default(), leaf: depth == OCTREE_DEPTH });
                    let id = nodes.len() - 1;
                    nodes[at].children[slot] = Some(id);
                    if depth == OCTREE_DEPTH {
                        leaves += 1;
                    }
                    id
                }
            };
        }
    }
    if leaves == 0 {
        return Err(crate::error::input_err("cannot quantise an empty image"));
    }

    let reducible = |nodes: &[OctreeNode], id: usize| {
        let n = &nodes[id];
        !n.leaf && n.children.iter().flatten().all(|&ch| nodes[ch].leaf)
    };
    let key = |nodes: &[OctreeNode], id: usize| (nodes[id].depth, Reverse(nodes[id].count), Reverse(id));
    let mut parent = vec![usize::MAX; nodes.len()];
    for (id, n) in nodes.iter().enumerate() {
        for &ch in n.children.iter().flatten() {
            parent[ch] = id;
        }
    }
    let mut heap: BinaryHeap<_> = (0..nodes.len()).filter(|&id| reducible(&nodes, id)).map(|id| key(&nodes, id)).collect();
    while leaves > c {
        let Some((_, _, Reverse(id))) = heap.pop() else { break };
        let children: Vec<usize> = nodes[id].children.iter().flatten().copied().collect();
        let mut acc = MeanAccumulator::default();
        for &ch in &children {
            acc.merge(&nodes[ch].mean);
        }
        nodes[id].mean = acc;
        let children = children.len();
        nodes[id].leaf = true;
        nodes[id].children = [None; 8];
        leaves = leaves + 1 - children;
        let p = parent[id];
        if p != usize::MAX && reducible(&nodes, p) {
            heap.push(key(&nodes, p));
        }
    }

    let mut colours = Vec::new();
    let mut leaf_index: HashMap<usize, usize> = HashMap::new();
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let n = &nodes[id];
        if n.leaf {
            leaf_index.insert(id, colours.len());
            colours.push(n.mean.mean());
        } else {
            stack.extend(n.children.iter().rev().flatten());
        }
    }
    let index = img
        .pixels()
        .map(|px| {
            let bytes = px.map(to_byte);
            let mut at = 0;
            while !nodes[at].leaf {
                at = nodes[at].children[octant(bytes, nodes[at].depth)].expect("pixel path exists");
            }
            leaf_index[&at]
        })
        .collect();
    let n = colours.len();
    Ok((Palette::new(colours)?, IndexMap::new(img.height(), img.width(), n, index)?))
}

/// A classical quantiser selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    MedianCut,
    MedianCutDither,
    Octree,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::MedianCut, Baseline::MedianCutDither, Baseline::Octree];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::MedianCut => "mediancut",
            Baseline::MedianCutDither => "mediancut-dither",
            Baseline::Octree => "octree",
        }
    }

    pub fn quantise(self, img: &RgbImage, c: usize) -> Result<(Palette, IndexMap)> {
        match self {
            Baseline::MedianCut => median_cut(img, c),
            Baseline::MedianCutDither => median_cut_dither(img, c),
            Baseline::Octree => octree_quantise(img, c),
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s.to_ascii_lowercase())
            .ok_or_else(|| config_err(format!("unknown baseline {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, px: &[[f64; 3]]) -> RgbImage {
        RgbImage::from_pixels(h, w, px).unwrap()
    }

    fn reconstruct(p: &Palette, m: &IndexMap) -> RgbImage {
        p.render(m)
    }

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|k| (a[k] - b[k]).abs() <= tol)
    }

    #[test]
    fn median_cut_examples() {
        let img = image(2, 2, &[[0.0, 0.0, 0.0], [0.0, 0.0, 0.1], [1.0, 1.0, 0.9], [1.0, 1.0, 1.0]]);
        let (p, m) = median_cut(&img, 2).unwrap();
        assert_eq!(p.len(), 2);
        assert!(close(p.colours[0], [0.0, 0.0, 0.05], 1e-12));
        assert!(close(p.colours[1], [1.0, 1.0, 0.95], 1e-12));
        assert_eq!(m.data, vec![0, 0, 1, 1]);

        let (p, _) = median_cut(&img, 1).unwrap();
        assert!(close(p.colours[0], [0.5, 0.5, 0.5], 1e-12));

        let three = image(1, 4, &[[0.2, 0.3, 0.4], [0.9, 0.1, 0.0], [0.2, 0.3, 0.4], [0.0, 1.0, 0.5]]);
        let (p, m) = median_cut(&three, 3).unwrap();
        assert_eq!(reconstruct(&p, &m), three);
        let (p, _) = median_cut(&three, 8).unwrap();
        assert_eq!(p.len(), 3);
        assert!(median_cut(&three, 0).is_err());
    }

    #[test]
    fn dither_examples() {
        let bw = Palette::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let img = image(1, 2, &[[0.6; 3], [0.6; 3]]);
        assert_eq!(floyd_steinberg_dither(&img, &bw).unwrap().data, vec![1, 0]);

        let pal = Palette::new(vec![[0.1, 0.2, 0.3], [0.9, 0.5, 0.0]]).unwrap();
        let exact = image(2, 2, &[[0.1, 0.2, 0.3], [0.9, 0.5, 0.0], [0.9, 0.5, 0.0], [0.1, 0.2, 0.3]]);
        assert_eq!(floyd_steinberg_dither(&exact, &pal).unwrap().data, vec![0, 1, 1, 0]);

        let grey = RgbImage::filled(64, 64, [0.5; 3]).unwrap();
        let m = floyd_steinberg_dither(&grey, &bw).unwrap();
        let white = m.data.iter().filter(|&&i| i == 1).count() as f64 / m.data.len() as f64;
        assert!((white - 0.5).abs() < 0.02, "white share {white}");
        assert!(floyd_steinberg_dither(&grey, &Palette { colours: vec![] }).is_err());
    }

    /// Error diffusion written independently: a padded float buffer and
    /// explicit neighbour offsets.
    fn dither_oracle(img: &RgbImage, pal: &Palette) -> Vec<usize> {
        let (h, w) = (img.height(), img.width());
        let mut buf = vec![vec![[0.0f64; 3]; w + 2]; h + 1];
        for r in 0..h {
            for c in 0..w {
                buf[r][c + 1] = img.pixel(r, c);
            }
        }
        let mut out = Vec::new();
        for r in 0..h {
            for c in 1..=w {
                let old = buf[r][c];
                let mut best = 0;
                for k in 1..pal.len() {
                    let d = |j: usize| (0..3).map(|i| (pal.colours[j][i] - old[i]).powi(2)).sum::<f64>();
                    if d(k) < d(best) {
                        best = k;
                    }
                }
                out.push(best);
                for (dr, dc, wt) in [(0, 1isize, 7.0), (1, -1, 3.0), (1, 0, 5.0), (1, 1, 1.0)] {
                    let (rr, cc) = (r + dr, (c as isize + dc) as usize);
                    if rr < h && cc >= 1 && cc <= w {
                        for i in 0..3 {
                            let e = old[i] - pal.colours[best][i];
                            buf[rr][cc][i] = (buf[rr][cc][i] + e * wt / 16.0).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dither_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = RgbImage::new(9, 7, (0..189).map(|_| rng.random()).collect()).unwrap();
        let pal = Palette::new((0..5).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
        assert_eq!(floyd_steinberg_dither(&img, &pal).unwrap().data, dither_oracle(&img, &pal));
    }

    #[test]
    fn octree_examples() {
        let img = image(1, 4, &[[0.2, 0.4, 0.6], [1.0, 0.0, 0.0], [0.2, 0.4, 0.6], [0.0, 0.0, 1.0]]);
        let (p, m) = octree_quantise(&img, 3).unwrap();
        assert_eq!(reconstruct(&p, &m), img);
        let (p, _) = octree_quantise(&img, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert!(close(p.colours[0], [0.35, 0.2, 0.55], 1e-12));
    }

    /// Lloyd iterations from the two extreme pixels.
    fn two_means(px: &[[f64; 3]]) -> [[f64; 3]; 2] {
        let lum = |p: &[f64; 3]| p.iter().sum::<f64>();
        let mut c = [*px.iter().min_by(|a, b| lum(a).total_cmp(&lum(b))).unwrap(), *px.iter().max_by(|a, b| lum(a).total_cmp(&lum(b))).unwrap()];
        for _ in 0..20 {
            let mut s = [[0.0; 3]; 2];
            let mut n = [0.0; 2];
            for p in px {
                let d = |q: &[f64; 3]| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
                let j = usize::from(d(&c[1]) < d(&c[0]));
                for k in 0..3 {
                    s[j][k] += p[k];
                }
                n[j] += 1.0;
            }
            c = [s[0].map(|v| v / n[0]), s[1].map(|v| v / n[1])];
        }
        c
    }

    #[test]
    fn octree_two_clusters_match_two_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut px = Vec::new();
        for i in 0..64 {
            let base = if i % 2 == 0 { [0.1, 0.15, 0.2] } else { [0.85, 0.8, 0.9] };
            px.push(base.map(|b| b + rng.random_range(-0.05..0.05)));
        }
        let img = image(8, 8, &px);
        let (p, _) = octree_quantise(&img, 2).unwrap();
        let mut got = p.colours.clone();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let want = two_means(&px);
        for (g, w) in got.iter().zip(&want) {
            assert!(close(*g, *w, 1.0 / 256.0), "{g:?} vs {w:?}");
        }
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
        }
        assert!("kmeans".parse::<Baseline>().is_err());
    }

    fn arb_image() -> impl Strategy<Value = RgbImage> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=255, h * w * 3)
                .prop_map(move |b| RgbImage::new(h, w, b.iter().map(|&v| v as f64 / 255.0).collect()).unwrap())
        })
    }

    fn palette_image(h: usize, w: usize, picks: &[usize], pal: &[[f64; 3]]) -> RgbImage {
        RgbImage::from_pixels(h, w, &picks.iter().map(|&i| pal[i % pal.len()]).collect::<Vec<_>>()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn outputs_use_palette_entries(img in arb_image(), c in 1usize..9) {
            for b in [Baseline::MedianCut, Baseline::Octree] {
                let (p, m) = b.quantise(&img, c).unwrap();
                prop_assert!(p.len() <= c);
                prop_assert_eq!(m.colours, p.len());
                for (px, &i) in reconstruct(&p, &m).pixels().zip(&m.data) {
                    prop_assert_eq!(px, p.colours[i]);
                }
            }
        }

        #[test]
        fn few_colours_reproduced_exactly(
            bytes in proptest::collection::vec(0u8..=255, 3 * 4),
            picks in proptest::collection::vec(0usize..4, 12),
            c in 4usize..7,
        ) {
            let pal: Vec<[f64; 3]> = bytes.chunks(3).map(|b| [b[0] as f64 / 255.0, b[1] as f64 / 255.0, b[2] as f64 / 255.0]).collect();
            let img = palette_image(3, 4, &picks, &pal);
            for b in [Baseline::MedianCut, Baseline::Octree] {
                let (p, m) = b.quantise(&img, c).unwrap();
                prop_assert_eq!(reconstruct(&p, &m).mse(&img).unwrap(), 0.0);
            }
        }

        #[test]
        fn median_cut_not_worse_than_mean(img in arb_image(), c in 1usize..9) {
            let (p1, m1) = median_cut(&img, 1).unwrap();
            let (p, m) = median_cut(&img, c).unwrap();
            let base = reconstruct(&p1, &m1).mse(&img).unwrap();
            prop_assert!(reconstruct(&p, &m).mse(&img).unwrap() <= base + 1e-12);
        }

        #[test]
        fn deterministic(img in arb_image(), c in 1usize..9) {
            for b in Baseline::ALL {
                let a = b.quantise(&img, c).unwrap();
                let again = b.quantise(&img, c).unwrap();
                prop_assert_eq!(a, again);
            }
        }
    }
}
