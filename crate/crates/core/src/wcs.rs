//! World Color Survey maps: human term distributions per chip, machine
//! modal-index maps built from quantised data, and the projection of a
//! human map onto image pixels.

use std::fmt::Write as _;
use std::path::Path;

use crate::colour::{hsv_to_cone, rgb_pixel_to_hsv, to_byte, Chip, HsvPixel, RgbImage, WcsGrid};
use crate::cqformer::{argmax_lowest, IndexMap};
use crate::error::{input_err, Error, Result};

const CHIPS: usize = WcsGrid::CHIPS;

/// Per-chip distributions over named colour terms.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanWcsMap {
    terms: Vec<String>,
    /// `CHIPS × C`, chip-major in `Chip::flat` order.
    probs: Vec<f64>,
}

impl HumanWcsMap {
    pub fn new(terms: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        let c = terms.len();
        if c == 0 {
            return Err(input_err("a human map needs at least one term"));
        }
        if probs.len() != CHIPS * c {
            return Err(input_err(format!("expected {} probabilities, got {}", CHIPS * c, probs.len())));
        }
        for (chip, row) in probs.chunks_exact(c).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(input_err(format!("chip {chip} is not a probability distribution")));
            }
        }
        Ok(Self { terms, probs })
    }

    pub fn uniform(terms: Vec<String>) -> Result<Self> {
        let c = terms.len().max(1);
        Self::new(terms, vec![1.0 / c as f64; CHIPS * c])
    }

    /// One-hot map from a term index per chip.
    pub fn one_hot(terms: Vec<String>, modes: &[usize]) -> Result<Self> {
        let c = terms.len();
        if modes.len() != CHIPS {
            return Err(input_err(format!("expected {CHIPS} chip modes, got {}", modes.len())));
        }
        let mut probs = vec![0.0; CHIPS * c];
        for (chip, &m) in modes.iter().enumerate() {
            if m >= c {
                return Err(input_err(format!("term index {m} out of range for {c} terms")));
            }
            probs[chip * c + m] = 1.0;
        }
        Self::new(terms, probs)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn colours(&self) -> usize {
        self.terms.len()
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == name)
    }

    pub fn chip(&self, chip: Chip) -> &[f64] {
        let c = self.colours();
        &self.probs[chip.flat() * c..(chip.flat() + 1) * c]
    }

    /// Modal term per chip, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.chunks_exact(self.colours()).map(argmax_lowest).collect()
    }

    /// Probability-weighted (hue, value) centre of each term, averaged in
    /// cone coordinates over chip centres with saturation 1.
    pub fn term_centres(&self) -> Vec<(f64, f64)> {
        let c = self.colours();
        let mut acc = vec![[0.0; 4]; c];
        for chip in WcsGrid::chips() {
            let x = hsv_to_cone(WcsGrid::chip_center(chip));
            for (k, &p) in self.chip(chip).iter().enumerate() {
                for d in 0..3 {
                    acc[k][d] += p * x[d];
                }
                acc[k][3] += p;
            }
        }
        acc.iter()
            .map(|a| {
                if a[3] == 0.0 {
                    return (0.0, 0.5);
                }
                let (x, y, v) = (a[0] / a[3], a[1] / a[3], a[2] / a[3]);
                (y.atan2(x).rem_euclid(std::f64::consts::TAU), v)
            })
            .collect()
    }

    /// Reads the `row,col,term,probability` CSV. Terms are indexed in order
    /// of first appearance; chips absent from the file are uniform.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Load { path: path.to_path_buf(), line, message };
        let mut terms: Vec<String> = Vec::new();
        let mut entries: Vec<(usize, usize, f64, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(err(line, format!("expected 4 fields, found {}", fields.len())));
            }
            if fields[0] == "row" {
                continue;
            }
            let row: usize = fields[0].parse().map_err(|_| err(line, format!("bad row {:?}", fields[0])))?;
            let col: usize = fields[1].parse().map_err(|_| err(line, format!("bad column {:?}", fields[1])))?;
            if row >= WcsGrid::ROWS || col >= WcsGrid::COLS {
                return Err(err(line, format!("chip ({row}, {col}) outside the 8x40 grid")));
            }
            if fields[2].is_empty() {
                return Err(err(line, "empty term name".into()));
            }
            let p: f64 = fields[3].parse().map_err(|_| err(line, format!("bad probability {:?}", fields[3])))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(err(line, format!("probability {p} outside [0, 1]")));
            }
            let term = match terms.iter().position(|t| t == fields[2]) {
                Some(t) => t,
                None => {
                    terms.push(fields[2].to_string());
                    terms.len() - 1
                }
            };
            entries.push((Chip { row, col }.flat(), term, p, line));
        }
        let c = terms.len();
        if c == 0 {
            return Err(err(0, "no entries".into()));
        }
        let mut probs = vec![f64::NAN; CHIPS * c];
        let mut first_line = vec![0usize; CHIPS];
        for &(chip, term, p, line) in &entries {
            let row = &mut probs[chip * c..(chip + 1) * c];
            if first_line[chip] == 0 {
                first_line[chip] = line;
                row.fill(0.0);
            }
            if row[term] != 0.0 {
                return Err(err(line, format!("duplicate entry for chip {chip} term {:?}", terms[term])));
            }
            row[term] = p;
        }
        for (chip, row) in probs.chunks_exact_mut(c).enumerate() {
            if first_line[chip] == 0 {
                row.fill(1.0 / c as f64);
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-3 {
                return Err(err(first_line[chip], format!("probabilities for chip {chip} sum to {sum}")));
            }
            if (sum - 1.0).abs() > 1e-9 {
                row.iter_mut().for_each(|p| *p /= sum);
            }
        }
        Self::new(terms, probs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,term,probability\n");
        for chip in WcsGrid::chips() {
            for (term, p) in self.terms.iter().zip(self.chip(chip)) {
                let _ = writeln!(out, "{},{},{},{}", chip.row, chip.col, term, p);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-pixel human term distributions, `H×W×C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanLanguageImageMap {
    pub height: usize,
    pub width: usize,
    pub colours: usize,
    pub data: Vec<f64>,
}

impl HumanLanguageImageMap {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.colours..(i + 1) * self.colours]
    }
}

pub fn image_pixel_chip(rgb: [f64; 3]) -> Chip {
    WcsGrid::pixel_to_chip(rgb_pixel_to_hsv(rgb))
}

/// Copies each pixel's chip distribution into place.
pub fn project_human_map(img: &RgbImage, hmap: &HumanWcsMap) -> HumanLanguageImageMap {
    let data = img.pixels().flat_map(|px| hmap.chip(image_pixel_chip(px)).to_vec()).collect();
    HumanLanguageImageMap { height: img.height(), width: img.width(), colours: hmap.colours(), data }
}

/// Modal colour index per chip from a quantised dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineWcsMap {
    colours: usize,
    /// `CHIPS × C` pixel counts.
    counts: Vec<u64>,
    /// Per-colour byte sums and pixel counts for display colours.
    rgb_sums: Vec<[u64; 3]>,
    rgb_counts: Vec<u64>,
}

impl MachineWcsMap {
    pub fn new(colours: usize) -> Self {
        Self { colours, counts: vec![0; CHIPS * colours], rgb_sums: vec![[0; 3]; colours], rgb_counts: vec![0; colours] }
    }

    pub fn colours(&self) -> usize {
        self.colours
    }

    /// Adds one image and its colour indices.
    pub fn add(&mut self, img: &RgbImage, index: &IndexMap) -> Result<()> {
        if index.data.len() != img.num_pixels() {
            return Err(input_err("index map does not match the image"));
        }
        if index.colours > self.colours {
            return Err(input_err(format!("index map uses {} colours, map holds {}", index.colours, self.colours)));
        }
        for (px, &k) in img.pixels().zip(&index.data) {
            let chip = image_pixel_chip(px);
            self.counts[chip.flat() * self.colours + k] += 1;
            for d in 0..3 {
                self.rgb_sums[k][d] += u64::from(to_byte(px[d]));
            }
            self.rgb_counts[k] += 1;
        }
        Ok(())
    }

    /// Winning colour per chip, `None` when no pixel landed there.
    pub fn index(&self, chip: Chip) -> Option<usize> {
        let row = &self.counts[chip.flat() * self.colours..(chip.flat() + 1) * self.colours];
        if row.iter().all(|&n| n == 0) {
            return None;
        }
        let mut best = 0;
        for k in 1..self.colours {
            if row[k] > row[best] {
                best = k;
            }
        }
        Some(best)
    }

    pub fn indices(&self) -> Vec<Option<usize>> {
        WcsGrid::chips().map(|c| self.index(c)).collect()
    }

    pub fn mass(&self, chip: Chip) -> u64 {
        self.counts[chip.flat() * self.colours..(chip.flat() + 1) * self.colours].iter().sum()
    }

    pub fn total_mass(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean RGB of every pixel assigned to colour `k`.
    pub fn display_colour(&self, k: usize) -> Option<[f64; 3]> {
        let n = self.rgb_counts[k];
        (n > 0).then(|| self.rgb_sums[k].map(|s| s as f64 / (255.0 * n as f64)))
    }

    /// Fraction of all pixels assigned to each colour.
    pub fn pixel_shares(&self) -> Vec<f64> {
        let total: u64 = self.rgb_counts.iter().sum();
        self.rgb_counts.iter().map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 }).collect()
    }

    /// Chips won by each colour.
    pub fn regions(&self) -> Vec<Vec<Chip>> {
        let mut out = vec![Vec::new(); self.colours];
        for chip in WcsGrid::chips() {
            if let Some(k) = self.index(chip) {
                out[k].push(chip);
            }
        }
        out
    }

    /// `row,col,index,mass,r,g,b`; unobserved chips leave the last four
    /// fields empty apart from the zero mass.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,index,mass,r,g,b\n");
        for chip in WcsGrid::chips() {
            match self.index(chip) {
                Some(k) => {
                    let [r, g, b] = self.display_colour(k).unwrap_or([0.0; 3]);
                    let _ = writeln!(out, "{},{},{},{},{:.6},{:.6},{:.6}", chip.row, chip.col, k, self.mass(chip), r, g, b);
                }
                None => {
                    let _ = writeln!(out, "{},{},,0,,,", chip.row, chip.col);
                }
            }
        }
        out
    }

    /// Renders one `cell×cell` square per chip, lightest row at the top;
    /// unobserved chips are white with a grey cross.
    pub fn render(&self, cell: usize) -> RgbImage {
        let cell = cell.max(1);
        let (h, w) = (WcsGrid::ROWS * cell, WcsGrid::COLS * cell);
        let mut data = vec![1.0; h * w * 3];
        for chip in WcsGrid::chips() {
            let top = (WcsGrid::ROWS - 1 - chip.row) * cell;
            let left = chip.col * cell;
            let fill = self.index(chip).and_then(|k| self.display_colour(k));
            for y in 0..cell {
                for x in 0..cell {
                    let px = match fill {
                        Some(c) => c,
                        None if x == y || x + y + 1 == cell => [0.6; 3],
                        None => [1.0; 3],
                    };
                    let at = ((top + y) * w + left + x) * 3;
                    data[at..at + 3].copy_from_slice(&px);
                }
            }
        }
        RgbImage::new(h, w, data).expect("display colours are in range")
    }
}

/// Builds a machine map by quantising every image with `quantiser`.
pub fn build_machine_wcs_map<'a, I, F>(images: I, colours: usize, mut quantiser: F) -> Result<MachineWcsMap>
where
    I: IntoIterator<Item = &'a RgbImage>,
    F: FnMut(&RgbImage) -> Result<IndexMap>,
{
    let mut map = MachineWcsMap::new(colours);
    for img in images {
        let idx = quantiser(img)?;
        map.add(img, &idx)?;
    }
    Ok(map)
}

/// Fraction of observed chips whose machine index equals the human modal
/// term. An empty observed set yields 0.
pub fn map_agreement(machine: &MachineWcsMap, human: &HumanWcsMap) -> Result<f64> {
    if machine.colours() != human.colours() {
        return Err(input_err(format!(
            "machine map has {} colours, human map {} terms",
            machine.colours(),
            human.colours()
        )));
    }
    let modes = human.argmax();
    let mut observed = 0usize;
    let mut hits = 0usize;
    for chip in WcsGrid::chips() {
        if let Some(k) = machine.index(chip) {
            observed += 1;
            hits += usize::from(k == modes[chip.flat()]);
        }
    }
    if observed == 0 {
        log::warn!("machine map has no observed chips; agreement defined as 0");
        return Ok(0.0);
    }
    Ok(hits as f64 / observed as f64)
}

/// The Nafaanra (1978) three-term map shipped with the crate: an
/// approximation of the published mode map (light, dark, warm), not survey
/// data.
pub fn nafaanra_1978() -> HumanWcsMap {
    HumanWcsMap::parse(include_str!("../data/nafaanra_1978.csv"), Path::new("nafaanra_1978.csv"))
        .expect("bundled map is valid")
}

/// Chip centre as an RGB colour.
pub fn chip_rgb(chip: Chip) -> [f64; 3] {
    crate::colour::hsv_pixel_to_rgb(WcsGrid::chip_center(chip))
}

/// Chip centre with an explicit saturation.
pub fn chip_rgb_with_saturation(chip: Chip, s: f64) -> [f64; 3] {
    let c = WcsGrid::chip_center(chip);
    crate::colour::hsv_pixel_to_rgb(HsvPixel::new(c.h, s, c.v))
}

#[cfg(test)]
pub(crate) fn count_by<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> std::collections::HashMap<T, usize> {
    let mut m = std::collections::HashMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn terms(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn chip_image(chips: &[Chip], reps: usize) -> RgbImage {
        let px: Vec<[f64; 3]> = chips.iter().flat_map(|&c| std::iter::repeat_n(chip_rgb_with_saturation(c, 1.0), reps)).collect();
        RgbImage::from_pixels(1, px.len(), &px).unwrap()
    }

    #[test]
    fn chip_centres_round_trip_through_rgb() {
        for chip in WcsGrid::chips() {
            assert_eq!(image_pixel_chip(chip_rgb_with_saturation(chip, 1.0)), chip, "{chip:?}");
        }
    }

    #[test]
    fn nafaanra_fixture() {
        let m = nafaanra_1978();
        assert_eq!(m.terms(), &["fiNge", "wOO", "nyiE"]);
        let hits: Vec<Chip> = WcsGrid::chips().filter(|&c| m.chip(c) == [0.09, 0.04, 0.87]).collect();
        assert_eq!(hits, vec![Chip { row: 4, col: 2 }]);
        let modes = m.argmax();
        assert_eq!(modes[Chip { row: 7, col: 20 }.flat()], 0);
        assert_eq!(modes[Chip { row: 0, col: 20 }.flat()], 1);
        assert_eq!(modes[Chip { row: 4, col: 1 }.flat()], 2);
        let img = RgbImage::from_pixels(1, 1, &[chip_rgb_with_saturation(Chip { row: 4, col: 2 }, 0.8)]).unwrap();
        assert_eq!(project_human_map(&img, &m).data, vec![0.09, 0.04, 0.87]);
    }

    #[test]
    fn csv_round_trip_and_one_hot() {
        let m = nafaanra_1978();
        let again = HumanWcsMap::parse(&m.to_csv(), Path::new("x")).unwrap();
        assert_eq!(again, m);
        let text = "row,col,term,probability\n0,0,a,1\n3,5,b,1\n";
        let m = HumanWcsMap::parse(text, Path::new("x")).unwrap();
        assert_eq!(m.chip(Chip { row: 0, col: 0 }), &[1.0, 0.0]);
        assert_eq!(m.chip(Chip { row: 3, col: 5 }), &[0.0, 1.0]);
        assert_eq!(m.chip(Chip { row: 1, col: 1 }), &[0.5, 0.5]);
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let line_of = |text: &str| match HumanWcsMap::parse(text, Path::new("f.csv")) {
            Err(Error::Load { line, .. }) => line,
            other => panic!("expected load error, got {other:?}"),
        };
        assert_eq!(line_of("row,col,term,probability\n0,0,a,0.5\n0,0,b\n"), 3);
        assert_eq!(line_of("0,0,a,1.5\n"), 1);
        assert_eq!(line_of("0,0,a,0.5\n0,1,a,1\n0,0,b,0.2\n"), 1);
        assert_eq!(line_of("9,0,a,1\n"), 1);
        assert_eq!(line_of("0,x,a,1\n"), 1);
    }

    #[test]
    fn machine_map_examples() {
        let img = RgbImage::filled(3, 3, chip_rgb(Chip { row: 5, col: 12 })).unwrap();
        let idx = IndexMap::new(3, 3, 2, vec![1; 9]).unwrap();
        let map = build_machine_wcs_map([&img], 2, |_| Ok(idx.clone())).unwrap();
        let observed: Vec<(Chip, usize)> = WcsGrid::chips().filter_map(|c| map.index(c).map(|k| (c, k))).collect();
        assert_eq!(observed, vec![(Chip { row: 5, col: 12 }, 1)]);
        assert_eq!(map.total_mass(), 9);

        let mut tie = MachineWcsMap::new(2);
        let a = RgbImage::filled(1, 10, chip_rgb(Chip { row: 2, col: 3 })).unwrap();
        tie.add(&a, &IndexMap::new(1, 10, 2, vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap()).unwrap();
        assert_eq!(tie.index(Chip { row: 2, col: 3 }), Some(0));

        assert!(build_machine_wcs_map([], 3, |_| unreachable!()).unwrap().indices().iter().all(Option::is_none));
    }

    #[test]
    fn two_hue_bins_give_two_clusters() {
        let chips = [Chip { row: 4, col: 7 }, Chip { row: 4, col: 25 }];
        let img = chip_image(&chips, 5);
        let idx: Vec<usize> = (0..10).map(|i| i / 5).collect();
        let map = build_machine_wcs_map([&img], 2, |_| IndexMap::new(1, 10, 2, idx.clone())).unwrap();
        // Oracle: count chips directly.
        let counted = count_by(img.pixels().map(|p| image_pixel_chip(p).flat()));
        assert_eq!(counted.len(), 2);
        let regions = map.regions();
        assert_eq!(regions, vec![vec![chips[0]], vec![chips[1]]]);
    }

    #[test]
    fn projection_examples() {
        let m = nafaanra_1978();
        let img = RgbImage::filled(2, 3, [0.9, 0.9, 0.95]).unwrap();
        let p = project_human_map(&img, &m);
        let chip = image_pixel_chip([0.9, 0.9, 0.95]);
        for i in 0..6 {
            assert_eq!(p.pixel(i), m.chip(chip));
        }
        let a = chip_rgb(Chip { row: 1, col: 30 });
        let b = chip_rgb(Chip { row: 6, col: 3 });
        let img = RgbImage::from_pixels(2, 2, &[a, b, a, b]).unwrap();
        let p = project_human_map(&img, &m);
        for (i, px) in img.pixels().enumerate() {
            assert_eq!(p.pixel(i), m.chip(WcsGrid::pixel_to_chip(rgb_pixel_to_hsv(px))));
        }
    }

    #[test]
    fn agreement_examples() {
        let modes: Vec<usize> = (0..CHIPS).map(|i| i % 3).collect();
        let human = HumanWcsMap::one_hot(terms(3), &modes).unwrap();
        let chips: Vec<Chip> = (0..4).map(|i| Chip::from_flat(i * 7)).collect();
        let img = chip_image(&chips, 1);
        let right: Vec<usize> = chips.iter().map(|c| modes[c.flat()]).collect();
        let map = build_machine_wcs_map([&img], 3, |_| IndexMap::new(1, 4, 3, right.clone())).unwrap();
        assert_eq!(map_agreement(&map, &human).unwrap(), 1.0);
        let half: Vec<usize> = right.iter().enumerate().map(|(i, &k)| if i < 2 { k } else { (k + 1) % 3 }).collect();
        let map = build_machine_wcs_map([&img], 3, |_| IndexMap::new(1, 4, 3, half.clone())).unwrap();
        assert_eq!(map_agreement(&map, &human).unwrap(), 0.5);
        assert_eq!(map_agreement(&MachineWcsMap::new(3), &human).unwrap(), 0.0);
        assert!(map_agreement(&MachineWcsMap::new(2), &human).is_err());
    }

    #[test]
    fn render_has_one_cell_per_chip() {
        let img = RgbImage::filled(2, 2, chip_rgb(Chip { row: 7, col: 0 })).unwrap();
        let map = build_machine_wcs_map([&img], 1, |_| IndexMap::new(2, 2, 1, vec![0; 4])).unwrap();
        let r = map.render(4);
        assert_eq!((r.height(), r.width()), (32, 160));
        assert_eq!(r.pixel(1, 2), map.display_colour(0).unwrap());
        assert_eq!(map.to_csv().lines().count(), CHIPS + 1);
    }

    #[test]
    fn term_centres_of_one_hot_regions() {
        let modes: Vec<usize> = WcsGrid::chips().map(|c| usize::from(c.row >= 4)).collect();
        let m = HumanWcsMap::one_hot(terms(2), &modes).unwrap();
        let centres = m.term_centres();
        assert!((centres[0].1 - 0.25).abs() < 1e-12);
        assert!((centres[1].1 - 0.75).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn machine_map_order_invariant(
            px in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0usize..3), 1..40),
            split in 0usize..40,
        ) {
            let pixels: Vec<[f64; 3]> = px.iter().map(|&(r, g, b, _)| [r, g, b]).collect();
            let idx: Vec<usize> = px.iter().map(|p| p.3).collect();
            let split = split.min(px.len());
            let mut forward = MachineWcsMap::new(3);
            let mut backward = MachineWcsMap::new(3);
            let parts: Vec<(RgbImage, IndexMap)> = [(0, split), (split, px.len())]
                .into_iter()
                .filter(|(s, e)| e > s)
                .map(|(s, e)| (
                    RgbImage::from_pixels(1, e - s, &pixels[s..e]).unwrap(),
                    IndexMap::new(1, e - s, 3, idx[s..e].to_vec()).unwrap(),
                ))
                .collect();
            for (img, m) in &parts {
                forward.add(img, m).unwrap();
            }
            for (img, m) in parts.iter().rev() {
                backward.add(img, m).unwrap();
            }
            prop_assert_eq!(&forward, &backward);
            prop_assert_eq!(forward.total_mass(), px.len() as u64);
            let shares: f64 = forward.pixel_shares().iter().sum();
            prop_assert!((shares - 1.0).abs() < 1e-12);
        }

        #[test]
        fn projection_rows_are_distributions(px in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..20)) {
            let m = nafaanra_1978();
            let pixels: Vec<[f64; 3]> = px.iter().map(|&(r, g, b)| [r, g, b]).collect();
            let img = RgbImage::from_pixels(1, pixels.len(), &pixels).unwrap();
            let p = project_human_map(&img, &m);
            for i in 0..pixels.len() {
                prop_assert!((p.pixel(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
