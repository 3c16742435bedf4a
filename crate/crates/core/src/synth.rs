//! Synthetic long-tailed domain data on the unit hypersphere.
//!
//! Domains are well-separated centers; each domain owns
//! `floor(head_classes / rank^zipf)` classes whose prototypes scatter around
//! the center, and samples scatter around their class prototype. Every domain
//! occupies a similar cap, so head domains pack many more classes into the
//! same area than tail domains do.
//!
//! Domain labels are kept out of the training path: [`SyntheticDataset::training_set`]
//! exposes inputs and class labels only, and the class→domain map sits behind
//! [`SyntheticDataset::domain_labels`], which evaluation code calls explicitly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, read_u32, read_u64, Matrix, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"DBDS";
pub const DATASET_VERSION: u32 = 1;

/// Rejection-sampling budget for domain centers.
pub const MAX_CENTER_DRAWS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_domains: usize,
    /// Classes in the largest (rank 1) domain.
    pub head_classes: usize,
    pub zipf_exponent: f64,
    pub input_dim: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    /// Held-out samples per class used for pairs and identification.
    pub eval_samples_per_class: usize,
    /// Per-coordinate std of class prototypes around their domain center.
    pub domain_spread: f64,
    /// Per-coordinate std of samples around their class prototype.
    pub class_spread: f64,
    /// Domain centers are redrawn until every pairwise cosine is below this.
    pub max_center_cosine: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 3,
            head_classes: 60,
            zipf_exponent: 1.0,
            input_dim: 32,
            samples_per_class: 20,
            eval_samples_per_class: 10,
            domain_spread: 0.1,
            class_spread: 0.1,
            max_center_cosine: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.num_domains < 2 {
            return bad("num_domains must be >= 2");
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be >= 0");
        }
        if !(self.domain_spread > 0.0) || !(self.class_spread > 0.0) {
            return bad("domain_spread and class_spread must be > 0");
        }
        if self.head_classes < self.num_domains {
            return bad("head_classes must be >= num_domains");
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return bad("input_dim and samples_per_class must be >= 1");
        }
        Ok(())
    }

    /// Classes per domain, largest first.
    pub fn domain_class_counts(&self) -> Vec<usize> {
        (1..=self.num_domains)
            .map(|rank| {
                let n = (self.head_classes as f64 / (rank as f64).powf(self.zipf_exponent)).floor();
                (n as usize).max(1)
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.domain_class_counts().iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// What training code is allowed to see.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ground-truth class → domain map. Only evaluation code should hold one.
#[derive(Clone, Copy, Debug)]
pub struct DomainLabels<'a> {
    class_to_domain: &'a [usize],
    num_domains: usize,
}

impl<'a> DomainLabels<'a> {
    pub fn domain_of(&self, class: usize) -> usize {
        self.class_to_domain[class]
    }

    pub fn as_slice(&self) -> &'a [usize] {
        self.class_to_domain
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn classes_in(&self, domain: usize) -> Vec<usize> {
        (0..self.class_to_domain.len())
            .filter(|&c| self.class_to_domain[c] == domain)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    config: SynthConfig,
    n: usize,
    c: usize,
    d: usize,
    domain_class_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    config: SynthConfig,
    inputs: Matrix,
    class_labels: Vec<usize>,
    splits: Vec<Split>,
    class_to_domain: Vec<usize>,
}

impl SyntheticDataset {
    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_domain.len()
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn training_set(&self) -> TrainingSet {
        let idx = self.indices_of(Split::Train);
        TrainingSet {
            inputs: self.inputs.select_rows(&idx),
            labels: idx.iter().map(|&i| self.class_labels[i]).collect(),
            num_classes: self.num_classes(),
        }
    }

    /// Evaluation-only access to ground-truth domains.
    pub fn domain_labels(&self) -> DomainLabels<'_> {
        DomainLabels {
            class_to_domain: &self.class_to_domain,
            num_domains: self.config.num_domains,
        }
    }

    pub fn domain_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains()];
        for &d in &self.class_to_domain {
            counts[d] += 1;
        }
        counts
    }

    /// Gallery is the first eval sample of each class; every later eval
    /// sample is a probe.
    pub fn identification_split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut seen = vec![false; self.num_classes()];
        let mut gallery = Vec::new();
        let mut probes = Vec::new();
        for i in self.indices_of(Split::Eval) {
            let c = self.class_labels[i];
            if seen[c] {
                probes.push(i);
            } else {
                seen[c] = true;
                gallery.push(i);
            }
        }
        (gallery, probes)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = DatasetHeader {
            config: self.config.clone(),
            n: self.len(),
            c: self.num_classes(),
            d: self.input_dim(),
            domain_class_counts: self.domain_class_counts(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        self.inputs.write_to(w)?;
        let mut buf = Vec::with_capacity(4 * (self.len() + self.num_classes()) + self.len());
        for &l in &self.class_labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &d in &self.class_to_domain {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend(self.splits.iter().map(|s| match s {
            Split::Train => 0u8,
            Split::Eval => 1u8,
        }));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let len = read_u64(r)? as usize;
        let mut json = Vec::new();
        r.take(len as u64).read_to_end(&mut json)?;
        if json.len() != len {
            return Err(Error::Format("truncated dataset header".into()));
        }
        let header: DatasetHeader = serde_json::from_slice(&json)?;
        let inputs = Matrix::read_from(r)?;
        if inputs.shape() != (header.n, header.d) {
            return Err(Error::Format(format!(
                "inputs block {:?} disagrees with header ({}, {})",
                inputs.shape(),
                header.n,
                header.d
            )));
        }
        let mut read_u32s = |count: usize| -> Result<Vec<usize>> {
            (0..count)
                .map(|_| read_u32(r).map(|v| v as usize))
                .collect()
        };
        let class_labels = read_u32s(header.n)?;
        let class_to_domain = read_u32s(header.c)?;
        let mut tags = vec![0u8; header.n];
        r.read_exact(&mut tags)?;
        let splits = tags
            .into_iter()
            .map(|t| match t {
                0 => Ok(Split::Train),
                1 => Ok(Split::Eval),
                other => Err(Error::Format(format!("bad split tag {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if class_labels.iter().any(|&l| l >= header.c)
            || class_to_domain
                .iter()
                .any(|&d| d >= header.config.num_domains)
        {
            return Err(Error::Format("label out of range".into()));
        }
        Ok(SyntheticDataset {
            config: header.config,
            inputs,
            class_labels,
            splits,
            class_to_domain,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturb_normalize(center: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = center.iter().map(|c| c + sigma * rng.gaussian()).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn domain_centers(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = Rng::new(cfg.seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_domains);
    let mut draws = 0;
    while centers.len() < cfg.num_domains {
        if draws >= MAX_CENTER_DRAWS {
            return Err(Error::SeparationUnsatisfiable { draws });
        }
        draws += 1;
        let c = unit_gaussian(&mut rng, cfg.input_dim);
        if centers.iter().all(|o| dot(o, &c) < cfg.max_center_cosine) {
            centers.push(c);
        }
    }
    Ok(centers)
}

/// The generator's noise-free class prototypes (C × input_dim) and each
/// class's domain. Evaluation-only, like the domain labels.
pub fn ground_truth_prototypes(cfg: &SynthConfig) -> Result<(Matrix, Vec<usize>)> {
    cfg.validate()?;
    let centers = domain_centers(cfg)?;
    let mut data = Vec::new();
    let mut domains = Vec::new();
    for (domain, &count) in cfg.domain_class_counts().iter().enumerate() {
        for _ in 0..count {
            let mut crng = Rng::derived(cfg.seed, domains.len() as u64);
            data.extend(perturb_normalize(
                &centers[domain],
                cfg.domain_spread,
                &mut crng,
            ));
            domains.push(domain);
        }
    }
    Ok((Matrix::new(domains.len(), cfg.input_dim, data)?, domains))
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let dim = cfg.input_dim;
    let centers = domain_centers(cfg)?;

    let counts = cfg.domain_class_counts();
    let per_class = cfg.samples_per_class + cfg.eval_samples_per_class;
    let total_classes: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total_classes * per_class * dim);
    let mut class_labels = Vec::with_capacity(total_classes * per_class);
    let mut splits = Vec::with_capacity(total_classes * per_class);
    let mut class_to_domain = Vec::with_capacity(total_classes);

    let mut class = 0usize;
    for (domain, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut crng = Rng::derived(cfg.seed, class as u64);
            let proto = perturb_normalize(&centers[domain], cfg.domain_spread, &mut crng);
            for j in 0..per_class {
                data.extend(perturb_normalize(&proto, cfg.class_spread, &mut crng));
                class_labels.push(class);
                splits.push(if j < cfg.samples_per_class {
                    Split::Train
                } else {
                    Split::Eval
                });
            }
            class_to_domain.push(domain);
            class += 1;
        }
    }
    let n = class_labels.len();
    Ok(SyntheticDataset {
        config: cfg.clone(),
        inputs: Matrix::new(n, dim, data)?,
        class_labels,
        splits,
        class_to_domain,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
    pub domain: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSV columns `idx_a,idx_b,same_class,domain_id`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "idx_a,idx_b,same_class,domain_id")?;
        for p in &self.pairs {
            writeln!(w, "{},{},{},{}", p.a, p.b, u8::from(p.same_class), p.domain)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "idx_a,idx_b,same_class,domain_id" {
                    return Err(Error::Format(format!("unexpected pair header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| -> Result<usize> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad integer {s:?}", n + 1)))
            };
            if f.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 fields", n + 1)));
            }
            pairs.push(Pair {
                a: parse(f[0])?,
                b: parse(f[1])?,
                same_class: parse(f[2])? != 0,
                domain: parse(f[3])?,
            });
        }
        Ok(PairList { pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?))
    }
}

/// Draws `count` distinct pairs out of `available`, either by rejection or,
/// when most of the candidates are needed, by enumerating and shuffling.
fn draw_distinct(
    count: usize,
    available: usize,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> (usize, usize),
    enumerate: impl FnOnce() -> Vec<(usize, usize)>,
) -> Vec<(usize, usize)> {
    if count * 2 > available {
        let mut all = enumerate();
        rng.shuffle(&mut all);
        all.truncate(count);
        return all;
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (a, b) = sample(rng);
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Same-class and different-class pairs drawn within each domain from the
/// held-out samples.
pub fn make_verification_pairs(
    ds: &SyntheticDataset,
    per_domain_pos: usize,
    per_domain_neg: usize,
    seed: u64,
) -> Result<PairList> {
    let domains = ds.domain_labels();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for i in ds.indices_of(Split::Eval) {
        by_class[ds.class_labels[i]].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut pairs = Vec::with_capacity(domains.num_domains() * (per_domain_pos + per_domain_neg));
    for domain in 0..domains.num_domains() {
        let classes = domains.classes_in(domain);
        let members: Vec<usize> = classes
            .iter()
            .flat_map(|&c| by_class[c].iter().copied())
            .collect();
        let sizes: Vec<usize> = classes.iter().map(|&c| by_class[c].len()).collect();

        let pos_available: usize = sizes.iter().map(|s| s * s.saturating_sub(1) / 2).sum();
        let total = members.len();
        let neg_available = total * total.saturating_sub(1) / 2 - pos_available;
        if per_domain_pos > pos_available || per_domain_neg > neg_available {
            return Err(Error::InsufficientSamples(format!(
                "domain {domain}: requested {per_domain_pos} positive / {per_domain_neg} negative pairs, \
                 {pos_available} / {neg_available} available"
            )));
        }

        let eligible: Vec<usize> = classes
            .iter()
            .copied()
            .filter(|&c| by_class[c].len() >= 2)
            .collect();
        let pos = draw_distinct(
            per_domain_pos,
            pos_available,
            &mut rng,
            |rng| {
                let c = eligible[rng.below(eligible.len())];
                let s = &by_class[c];
                let i = rng.below(s.len());
                let mut j = rng.below(s.len() - 1);
                if j >= i {
                    j += 1;
                }
                (s[i], s[j])
            },
            || {
                let mut all = Vec::with_capacity(pos_available);
                for &c in &classes {
                    let s = &by_class[c];
                    for i in 0..s.len() {
                        for j in i + 1..s.len() {
                            all.push((s[i], s[j]));
                        }
                    }
                }
                all
            },
        );
        let label = |i: usize| ds.class_labels[i];
        let neg = draw_distinct(
            per_domain_neg,
            neg_available,
            &mut rng,
            |rng| loop {
                let a = members[rng.below(total)];
                let b = members[rng.below(total)];
                if label(a) != label(b) {
                    return (a, b);
                }
            },
            || {
                let mut all = Vec::with_capacity(neg_available);
                for i in 0..total {
                    for j in i + 1..total {
                        if label(members[i]) != label(members[j]) {
                            all.push((members[i], members[j]));
                        }
                    }
                }
                all
            },
        );
        pairs.extend(pos.into_iter().map(|(a, b)| Pair {
            a,
            b,
            same_class: true,
            domain,
        }));
        pairs.extend(neg.into_iter().map(|(a, b)| Pair {
            a,
            b,
            same_class: false,
            domain,
        }));
    }
    Ok(PairList { pairs })
}
