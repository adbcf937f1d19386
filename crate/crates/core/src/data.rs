//! Synthetic multi-domain images and the heterogeneous client partitioner.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Manifest, DATASET_MAGIC};
use crate::math::{Matrix, SeededRng};
use crate::model::Shape;
use crate::{Error, Result};

/// Inputs (one row per sample, channel-major) and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} input rows, {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, width),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Samples {
        let width = self.width();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Samples {
            inputs: Matrix::from_vec(indices.len(), width, data).expect("consistent width"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[Samples], width: usize) -> Samples {
        let n: usize = parts.iter().map(Samples::len).sum();
        let mut data = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        for p in parts {
            data.extend_from_slice(p.inputs.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        Samples {
            inputs: Matrix::from_vec(n, width, data).expect("consistent width"),
            labels,
        }
    }
}

/// Appearance transform of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Displacement of every blob centre, in pixels `(dy, dx)`.
    pub shift: (f64, f64),
    pub channel_gains: Vec<f64>,
    /// Constant added to each channel.
    pub channel_offsets: Vec<f64>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: usize,
    pub params: DomainParams,
    pub samples: Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub domains: usize,
    pub classes: usize,
    pub per_domain: usize,
    pub image: Shape,
    /// Base pixel noise; domain `d` adds `0.05·(d mod 3)` on top.
    pub noise: f64,
}

impl GeneratorConfig {
    pub fn desk(domains: usize, classes: usize, per_domain: usize) -> Self {
        Self {
            domains,
            classes,
            per_domain,
            image: [3, 16, 16],
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    colour: Vec<f64>,
}

fn class_prototypes(seed: u64, classes: usize, image: Shape) -> Vec<Vec<Blob>> {
    let [c, h, w] = image;
    (0..classes)
        .map(|k| {
            let mut rng = SeededRng::derive(seed, &[0xc1a5, k as u64]);
            (0..2)
                .map(|_| Blob {
                    cy: 2.0 + rng.uniform() * (h as f64 - 5.0),
                    cx: 2.0 + rng.uniform() * (w as f64 - 5.0),
                    sigma: 1.0 + 1.5 * rng.uniform(),
                    colour: (0..c).map(|_| 0.2 + 0.8 * rng.uniform()).collect(),
                })
                .collect()
        })
        .collect()
}

fn render(blobs: &[Blob], image: Shape, rng: &mut SeededRng, params: &DomainParams) -> Vec<f64> {
    let [c, h, w] = image;
    let plane = h * w;
    let mut px = vec![0.0; c * plane];
    for b in blobs {
        let cy = b.cy + params.shift.0 + 0.7 * rng.normal();
        let cx = b.cx + params.shift.1 + 0.7 * rng.normal();
        let amp = 1.0 + 0.1 * rng.normal();
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = amp * (-d2 * inv).exp();
                for ch in 0..c {
                    px[ch * plane + y * w + x] += v * b.colour[ch];
                }
            }
        }
    }
    for ch in 0..c {
        for v in &mut px[ch * plane..(ch + 1) * plane] {
            *v = params.channel_gains[ch] * *v + params.channel_offsets[ch] + params.noise * rng.normal();
        }
    }
    px
}

/// Per-domain appearance shift: blob centres move by up to 1.5 px per axis,
/// channel gains are drawn from `[0.6, 1.4]` and offsets from `[-0.2, 0.2]`.
pub fn domain_params(seed: u64, domain: usize, config: &GeneratorConfig) -> DomainParams {
    let mut rng = SeededRng::derive(seed, &[0xd0a1, domain as u64]);
    let c = config.image[0];
    DomainParams {
        shift: (3.0 * rng.uniform() - 1.5, 3.0 * rng.uniform() - 1.5),
        channel_gains: (0..c).map(|_| 0.6 + 0.8 * rng.uniform()).collect(),
        channel_offsets: (0..c).map(|_| 0.4 * rng.uniform() - 0.2).collect(),
        noise: config.noise + 0.05 * (domain % 3) as f64,
    }
}

/// Class-conditional blob images under a distinct appearance shift per
/// domain. Labels are balanced (`i mod classes`) before shuffling.
pub fn generate_domains(seed: u64, config: &GeneratorConfig) -> Result<Vec<DomainDataset>> {
    let GeneratorConfig {
        domains,
        classes,
        per_domain,
        image,
        ..
    } = *config;
    if domains < 2 {
        return Err(Error::InvalidArgument("need at least two domains (sources plus a target)".into()));
    }
    if classes == 0 || per_domain < classes {
        return Err(Error::InsufficientSamples(format!(
            "{per_domain} samples per domain cannot cover {classes} classes"
        )));
    }
    if image[1] != image[2] || image[1] < 5 {
        return Err(Error::InvalidArgument(format!("images must be square and at least 5x5, got {image:?}")));
    }
    let prototypes = class_prototypes(seed, classes, image);
    let width: usize = image.iter().product();
    (0..domains)
        .map(|d| {
            let params = domain_params(seed, d, config);
            let mut rng = SeededRng::derive(seed, &[0xda7a, d as u64]);
            let mut labels: Vec<usize> = (0..per_domain).map(|i| i % classes).collect();
            rng.shuffle(&mut labels);
            let mut data = Vec::with_capacity(per_domain * width);
            for &label in &labels {
                data.extend(render(&prototypes[label], image, &mut rng, &params));
            }
            Ok(DomainDataset {
                domain: d,
                params,
                samples: Samples::new(Matrix::from_vec(per_domain, width, data)?, labels)?,
            })
        })
        .collect()
}

/// Sample counts per (domain, client) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub lambda: f64,
    /// Domains owned by each client.
    pub ownership: Vec<Vec<usize>>,
    /// `counts[d][c]`.
    pub counts: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn domains(&self) -> usize {
        self.counts.len()
    }

    pub fn clients(&self) -> usize {
        self.ownership.len()
    }

    pub fn client_total(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// Number of domains contributing at least one sample to client `c`.
    pub fn client_domain_count(&self, c: usize) -> usize {
        self.counts.iter().filter(|row| row[c] > 0).count()
    }
}

/// Heterogeneous split: `n_{d,c}(λ) = λ·n_d/C + (1−λ)·1[d∈D_c]·n_d/|{c′: d∈D_c′}|`,
/// rounded per domain with largest remainders (ties to the lower client
/// index) so every domain is assigned exactly.
pub fn partition(lambda: f64, ownership: &[Vec<usize>], domain_sizes: &[usize]) -> Result<PartitionSpec> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("heterogeneity λ must lie in [0, 1], got {lambda}")));
    }
    let clients = ownership.len();
    if clients == 0 {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let domains = domain_sizes.len();
    let mut owned = vec![vec![false; clients]; domains];
    for (c, list) in ownership.iter().enumerate() {
        for &d in list {
            if d >= domains {
                return Err(Error::InvalidArgument(format!("client {c} owns unknown domain {d}")));
            }
            owned[d][c] = true;
        }
    }
    let mut counts = Vec::with_capacity(domains);
    for (d, &n_d) in domain_sizes.iter().enumerate() {
        let owners = owned[d].iter().filter(|&&o| o).count();
        if owners == 0 {
            return Err(Error::InvalidArgument(format!("domain {d} is not owned by any client")));
        }
        let exact: Vec<f64> = (0..clients)
            .map(|c| {
                let iid = lambda * n_d as f64 / clients as f64;
                let excl = if owned[d][c] { n_d as f64 / owners as f64 } else { 0.0 };
                iid + (1.0 - lambda) * excl
            })
            .collect();
        let mut row: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let assigned: usize = row.iter().sum();
        let mut remaining = n_d.saturating_sub(assigned);
        let mut order: Vec<usize> = (0..clients).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            // only pairs with positive mass may receive a remainder
            if exact[c] > 0.0 {
                row[c] += 1;
                remaining -= 1;
            }
        }
        debug_assert_eq!(row.iter().sum::<usize>(), n_d);
        counts.push(row);
    }
    Ok(PartitionSpec {
        lambda,
        ownership: ownership
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect(),
        counts,
    })
}

/// Deals domains round-robin to stations, then round-robin to the clients
/// of each station. Every client ends up owning at least one domain.
/// Clients are numbered station-major.
pub fn default_ownership(domains: usize, stations: usize, clients_per_station: &[usize]) -> Vec<Vec<usize>> {
    assert!(domains > 0 && stations > 0 && clients_per_station.len() == stations);
    let mut out = Vec::new();
    for s in 0..stations {
        let mut mine: Vec<usize> = (0..domains).filter(|d| d % stations == s).collect();
        if mine.is_empty() {
            mine.push(s % domains);
        }
        let k = clients_per_station[s];
        for j in 0..k {
            let mut owned: Vec<usize> = mine.iter().enumerate().filter(|(i, _)| i % k == j).map(|(_, &d)| d).collect();
            if owned.is_empty() {
                owned.push(mine[j % mine.len()]);
            }
            out.push(owned);
        }
    }
    out
}

/// Draws each client's samples without replacement. Within a domain the
/// clients receive disjoint slices of one shuffled index list.
pub fn materialize(spec: &PartitionSpec, domains: &[&Samples], rng: &mut SeededRng) -> Result<Vec<Samples>> {
    if domains.len() != spec.domains() {
        return Err(Error::Dimension(format!(
            "partition covers {} domains, {} datasets given",
            spec.domains(),
            domains.len()
        )));
    }
    let width = domains.first().map_or(0, |d| d.width());
    let mut per_client: Vec<Vec<Samples>> = vec![Vec::new(); spec.clients()];
    for (d, data) in domains.iter().enumerate() {
        let need: usize = spec.counts[d].iter().sum();
        if need > data.len() {
            return Err(Error::InsufficientSamples(format!(
                "domain {d} has {} samples, partition needs {need}",
                data.len()
            )));
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut idx);
        let mut offset = 0;
        for (c, &n) in spec.counts[d].iter().enumerate() {
            per_client[c].push(data.select(&idx[offset..offset + n]));
            offset += n;
        }
    }
    Ok(per_client.iter().map(|parts| Samples::concat(parts, width)).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetManifest {
    client: usize,
    input_shape: Shape,
    count: usize,
}

impl Manifest for DatasetManifest {
    fn payload_len(&self) -> usize {
        self.count * (self.input_shape.iter().product::<usize>() + 1)
    }
}

/// Writes a client's samples: inputs row-major, then labels as floats.
pub fn save_samples(path: &Path, client: usize, shape: Shape, samples: &Samples) -> Result<()> {
    if samples.width() != shape.iter().product::<usize>() {
        return Err(Error::Dimension("sample width does not match shape".into()));
    }
    let manifest = DatasetManifest {
        client,
        input_shape: shape,
        count: samples.len(),
    };
    let mut payload = samples.inputs.as_slice().to_vec();
    payload.extend(samples.labels.iter().map(|&l| l as f64));
    container::write_file(path, DATASET_MAGIC, &manifest, &payload)
}

pub fn load_samples(path: &Path) -> Result<(usize, Shape, Samples)> {
    let (m, values): (DatasetManifest, _) = container::read_file(path, DATASET_MAGIC)?;
    let width: usize = m.input_shape.iter().product();
    let split = m.count * width;
    let labels = values[split..].iter().map(|&v| v as usize).collect();
    let inputs = Matrix::from_vec(m.count, width, values[..split].to_vec())?;
    Ok((m.client, m.input_shape, Samples::new(inputs, labels)?))
}
