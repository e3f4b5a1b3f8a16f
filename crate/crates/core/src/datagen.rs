//! Gaussian-mixture generators for the two synthetic benchmarks, label
//! coarsening, and CSV storage.
//!
//! Gaussian draws use the ziggurat sampler of `rand_distr::StandardNormal`
//! on a `ChaCha8Rng` stream seeded from the caller's seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainDataset, LabelLevel};
use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::hierarchy::HierarchyMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Syn1,
    Syn2,
}

/// One generated domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynSpec {
    pub which: Benchmark,
    pub e: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl SynSpec {
    pub fn generate(&self) -> Result<DomainDataset> {
        match self.which {
            Benchmark::Syn1 => gen_syn1(self.e, self.sample_count, self.seed),
            Benchmark::Syn2 => gen_syn2(self.e, self.sample_count, self.seed),
        }
    }
}

/// Axis-aligned Gaussian component: means and standard deviations per
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub mean: [f64; 2],
    pub sd: [f64; 2],
}

pub fn syn1_components(e: f64) -> Vec<Component> {
    [(0.0, e), (30.0, -4.0 * e), (-30.0, -e)]
        .into_iter()
        .map(|(a, b)| Component {
            mean: [a, b],
            sd: [10.0, 10.0],
        })
        .collect()
}

/// Components in class order; label `l` is class `l + 1` of the 1-based list.
pub fn syn2_components(e: f64) -> Vec<Component> {
    const X1: [f64; 10] = [
        -180.0, -100.0, -20.0, 60.0, 140.0, -140.0, -60.0, 20.0, 100.0, 180.0,
    ];
    const X2: [f64; 10] = [-5.0, -3.0, -1.0, -2.0, -4.0, 4.0, 2.0, 1.0, 3.0, 5.0];
    X1.iter()
        .zip(X2)
        .map(|(&a, b)| Component {
            mean: [a, b * e],
            sd: [20.0, 30.0],
        })
        .collect()
}

pub fn syn1_hierarchy() -> HierarchyMap {
    HierarchyMap::new(vec![0, 1, 1]).expect("valid hierarchy")
}

/// Odd 1-based classes map to coarse 0, even ones to coarse 1.
pub fn syn2_hierarchy() -> HierarchyMap {
    HierarchyMap::new((0..10).map(|l| l % 2).collect()).expect("valid hierarchy")
}

pub fn domain_name(e: f64) -> String {
    format!("e={e}")
}

/// Draws `n` samples with uniformly chosen component index as the label.
pub fn sample_mixture(
    components: &[Component],
    domain: String,
    n: usize,
    seed: u64,
) -> Result<DomainDataset> {
    if n == 0 {
        return Err(invalid("sample_count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..components.len());
        let c = &components[i];
        for d in 0..2 {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c.mean[d] + c.sd[d] * z);
        }
        labels.push(i);
    }
    DomainDataset::new(domain, LabelLevel::Fine, Tensor::from_vec(n, 2, data), labels)
}

pub fn gen_syn1(e: f64, n: usize, seed: u64) -> Result<DomainDataset> {
    sample_mixture(&syn1_components(e), domain_name(e), n, seed)
}

pub fn gen_syn2(e: f64, n: usize, seed: u64) -> Result<DomainDataset> {
    sample_mixture(&syn2_components(e), domain_name(e), n, seed)
}

/// Same inputs with labels mapped through `hierarchy`.
pub fn coarsen_dataset(fine: &DomainDataset, hierarchy: &HierarchyMap) -> Result<DomainDataset> {
    if fine.level != LabelLevel::Fine {
        return Err(invalid(format!("domain `{}` is already coarse", fine.domain)));
    }
    let labels = fine
        .labels
        .iter()
        .map(|&y| hierarchy.coarsen(y))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DomainDataset {
        domain: fine.domain.clone(),
        level: LabelLevel::Coarse,
        inputs: fine.inputs.clone(),
        labels,
    })
}

pub fn save_csv(dataset: &DomainDataset, path: &Path) -> Result<()> {
    if dataset.domain.contains([',', '\n', '\r']) {
        return Err(invalid("domain name must not contain commas or newlines"));
    }
    let mut out = String::new();
    for j in 0..dataset.dim() {
        write!(out, "x{},", j + 1).expect("write to string");
    }
    out.push_str("y,domain,level\n");
    for i in 0..dataset.len() {
        for &v in dataset.inputs.row(i) {
            write!(out, "{v:.16e},").expect("write to string");
        }
        writeln!(out, "{},{},{}", dataset.labels[i], dataset.domain, dataset.level)
            .expect("write to string");
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn load_csv(path: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .filter(|(_, h)| !h.trim().is_empty())
        .ok_or_else(|| invalid(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let dim = cols.len().saturating_sub(3);
    let expected: Vec<String> = (1..=dim)
        .map(|j| format!("x{j}"))
        .chain(["y", "domain", "level"].map(String::from))
        .collect();
    if dim == 0 || cols != expected {
        return Err(parse_err(1, format!("unexpected header `{header}`")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain: Option<String> = None;
    let mut level: Option<LabelLevel> = None;
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(parse_err(
                no,
                format!("expected {} fields, found {}", dim + 3, fields.len()),
            ));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(no, format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(no, format!("non-finite value `{f}`")));
            }
            data.push(v);
        }
        let y = fields[dim]
            .trim()
            .parse()
            .map_err(|_| parse_err(no, format!("`{}` is not a label", fields[dim])))?;
        labels.push(y);
        let d = fields[dim + 1];
        match &domain {
            None => domain = Some(d.to_string()),
            Some(prev) if prev != d => {
                return Err(parse_err(no, format!("domain `{d}` differs from `{prev}`")))
            }
            _ => {}
        }
        let l: LabelLevel = fields[dim + 2].trim().parse().map_err(|m| parse_err(no, m))?;
        match level {
            None => level = Some(l),
            Some(prev) if prev != l => {
                return Err(parse_err(no, format!("level `{l}` differs from `{prev}`")))
            }
            _ => {}
        }
    }
    let (Some(domain), Some(level)) = (domain, level) else {
        return Err(invalid(format!("{} has no data rows", path.display())));
    };
    DomainDataset::new(domain, level, Tensor::from_vec(labels.len(), dim, data), labels)
}

/// Per-domain file list plus the hierarchy relating their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub hierarchy: HierarchyMap,
    /// How fine labels relate to the class list of the generator.
    pub class_indexing: String,
    pub domains: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: String,
    pub level: LabelLevel,
    pub path: PathBuf,
}

/// Request for `hilearn gen`: domains to generate and where to put them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub which: Benchmark,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub domains: Vec<GenDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDomain {
    pub e: f64,
    pub sample_count: usize,
    pub level: LabelLevel,
}

impl GenRequest {
    /// Writes one CSV per domain and `manifest.json` into `out_dir`. Domain
    /// `i` is drawn with seed `seed + i`.
    pub fn run(&self) -> Result<DatasetManifest> {
        fs::create_dir_all(&self.out_dir)?;
        let hierarchy = match self.which {
            Benchmark::Syn1 => syn1_hierarchy(),
            Benchmark::Syn2 => syn2_hierarchy(),
        };
        let mut domains = Vec::new();
        for (i, d) in self.domains.iter().enumerate() {
            let spec = SynSpec {
                which: self.which,
                e: d.e,
                sample_count: d.sample_count,
                seed: self.seed.wrapping_add(i as u64),
            };
            let mut ds = spec.generate()?;
            if d.level == LabelLevel::Coarse {
                ds = coarsen_dataset(&ds, &hierarchy)?;
            }
            let file = format!("{i:02}_{}_{}.csv", ds.domain.replace('=', "_"), d.level);
            save_csv(&ds, &self.out_dir.join(&file))?;
            domains.push(ManifestEntry {
                domain: ds.domain,
                level: d.level,
                path: PathBuf::from(file),
            });
        }
        let manifest = DatasetManifest {
            hierarchy,
            class_indexing: class_indexing(self.which).to_string(),
            domains,
        };
        fs::write(
            self.out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

pub fn class_indexing(which: Benchmark) -> &'static str {
    match which {
        Benchmark::Syn1 => "label l is mixture component N_l, l = 0, 1, 2",
        Benchmark::Syn2 => {
            "label l is class N_(l+1) of the 1-based list N_1..N_10; \
             odd classes coarsen to 0, even classes to 1"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_mean(ds: &DomainDataset, class: usize, coord: usize) -> (f64, usize) {
        let vals: Vec<f64> = (0..ds.len())
            .filter(|&i| ds.labels[i] == class)
            .map(|i| ds.inputs.get(i, coord))
            .collect();
        (vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
    }

    #[test]
    fn syn1_zero_domain_centers_second_coordinate() {
        for c in syn1_components(0.0) {
            assert_eq!(c.mean[1], 0.0);
        }
        for c in syn2_components(0.0) {
            assert_eq!(c.mean[1], 0.0);
        }
    }

    #[test]
    fn syn1_class_one_mean() {
        let ds = gen_syn1(50.0, 2000, 4).unwrap();
        let (m, _) = class_mean(&ds, 1, 1);
        let tol = 3.0 * 10.0 / (2000.0f64 / 3.0).sqrt();
        assert!((m + 200.0).abs() < tol, "{m}");
    }

    #[test]
    fn syn2_means_and_ordering() {
        let cs = syn2_components(20.0);
        let x1: Vec<f64> = cs.iter().map(|c| c.mean[0]).collect();
        assert_eq!(
            x1,
            vec![-180.0, -100.0, -20.0, 60.0, 140.0, -140.0, -60.0, 20.0, 100.0, 180.0]
        );
        assert_eq!(cs[9].mean[1], 100.0);
        let ds = gen_syn2(20.0, 20000, 1).unwrap();
        let (m, count) = class_mean(&ds, 9, 1);
        assert!((m - 100.0).abs() < 4.0 * 30.0 / (count as f64).sqrt(), "{m}");
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_syn1(50.0, 100, 7).unwrap(), gen_syn1(50.0, 100, 7).unwrap());
        assert_ne!(gen_syn1(50.0, 100, 7).unwrap(), gen_syn1(50.0, 100, 8).unwrap());
    }

    #[test]
    fn coarsening_examples() {
        let ds = DomainDataset::new(
            "t",
            LabelLevel::Fine,
            Tensor::zeros(4, 2),
            vec![0, 1, 2, 1],
        )
        .unwrap();
        let c = coarsen_dataset(&ds, &syn1_hierarchy()).unwrap();
        assert_eq!(c.labels, vec![0, 1, 1, 1]);
        assert_eq!(c.level, LabelLevel::Coarse);
        let id = coarsen_dataset(&ds, &HierarchyMap::identity(3).unwrap()).unwrap();
        assert_eq!(id.labels, ds.labels);
        // Label 4 is class N_5, an odd class.
        assert_eq!(syn2_hierarchy().coarsen(4), Ok(0));
        let bad = DomainDataset::new("t", LabelLevel::Fine, Tensor::zeros(1, 2), vec![3]).unwrap();
        assert!(coarsen_dataset(&bad, &syn1_hierarchy()).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_syn2(1.5, 50, 3).unwrap();
        save_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);

        fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::InvalidInput(_))));

        fs::write(&path, "x1,x2,y,domain,level\n1.0,2.0,0,a,fine\nNaN,1.0,1,a,fine\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 3, .. })));
        fs::write(&path, "x1,x2,y,domain,level\n1.0,2.0,0,a\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
    }
}
