//! Synthetic two-domain, two-modality retrieval data.
//!
//! Every identity owns a latent prototype. Image and text observations of an
//! identity are the prototype pushed through a modality-specific transform
//! (a fixed random rotation plus bias, scaled by the modality gap). Target
//! observations additionally go through a per-dimension rescaling and a
//! constant offset, both scaled by the domain shift. Gaussian noise is added
//! last.
//!
//! Target identities are returned only in a [`TargetGroundTruth`] sidecar so
//! that training code never sees them.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Anything an encoder can consume.
pub trait RawSample {
    fn raw(&self) -> &[f64];
    fn modality(&self) -> Modality;
    fn domain(&self) -> Domain;
}

impl<T: RawSample + ?Sized> RawSample for &T {
    fn raw(&self) -> &[f64] {
        (**self).raw()
    }
    fn modality(&self) -> Modality {
        (**self).modality()
    }
    fn domain(&self) -> Domain {
        (**self).domain()
    }
}

/// A labelled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub raw: Vec<f64>,
    pub identity: u32,
    pub modality: Modality,
    pub domain: Domain,
}

impl RawSample for Sample {
    fn raw(&self) -> &[f64] {
        &self.raw
    }
    fn modality(&self) -> Modality {
        self.modality
    }
    fn domain(&self) -> Domain {
        self.domain
    }
}

/// A target-domain observation. It carries no identity field at all.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub raw: Vec<f64>,
    pub modality: Modality,
}

impl RawSample for UnlabeledSample {
    fn raw(&self) -> &[f64] {
        &self.raw
    }
    fn modality(&self) -> Modality {
        self.modality
    }
    fn domain(&self) -> Domain {
        Domain::Target
    }
}

/// An aligned source image/text pair of the same identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePair {
    pub image: Sample,
    pub text: Sample,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetSet {
    pub images: Vec<UnlabeledSample>,
    pub texts: Vec<UnlabeledSample>,
}

/// Identities of the target samples, index-aligned with [`TargetSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetGroundTruth {
    pub image_ids: Vec<u32>,
    pub text_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub source: Vec<SourcePair>,
    pub target: TargetSet,
    pub ground_truth: TargetGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_identities_source: usize,
    pub num_identities_target: usize,
    pub samples_per_identity_per_modality: usize,
    pub d_raw: usize,
    pub domain_shift_strength: f64,
    pub modality_gap_strength: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_identities_source: 200,
            num_identities_target: 200,
            samples_per_identity_per_modality: 4,
            d_raw: 32,
            domain_shift_strength: 1.0,
            modality_gap_strength: 0.5,
            noise_sigma: 0.5,
            rng_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities_source", self.num_identities_source),
            ("num_identities_target", self.num_identities_target),
            (
                "samples_per_identity_per_modality",
                self.samples_per_identity_per_modality,
            ),
            ("d_raw", self.d_raw),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("domain_shift_strength", self.domain_shift_strength),
            ("modality_gap_strength", self.modality_gap_strength),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        Ok(())
    }

    /// Norm of the constant offset added to every target observation.
    pub fn target_offset_norm(&self) -> f64 {
        self.domain_shift_strength * (self.d_raw as f64).sqrt()
    }
}

struct ModalityMap {
    rotation: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random orthogonal matrix via Gram-Schmidt on Gaussian rows.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian_vec(rng, n);
        for b in &basis {
            let p = crate::numerics::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let nv = crate::numerics::norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
    basis
}

fn centered_prototypes(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut protos: Vec<Vec<f64>> = (0..count).map(|_| gaussian_vec(rng, d)).collect();
    let mut mean = vec![0.0; d];
    for p in &protos {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / count as f64);
    }
    for p in &mut protos {
        p.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    protos
}

/// Generates the source pairs, the unpaired target lists and the target
/// ground-truth sidecar. Deterministic in `spec.rng_seed`.
pub fn generate(spec: &DatasetSpec) -> Result<Generated> {
    spec.validate()?;
    let d = spec.d_raw;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let maps: Vec<ModalityMap> = (0..2)
        .map(|_| {
            let rotation = random_orthogonal(&mut rng, d);
            let bias = gaussian_vec(&mut rng, d);
            ModalityMap { rotation, bias }
        })
        .collect();
    let offset_dir = crate::numerics::l2_normalize(&gaussian_vec(&mut rng, d))?;
    let offset: Vec<f64> = offset_dir
        .iter()
        .map(|v| v * spec.target_offset_norm())
        .collect();
    let scales: Vec<f64> = (0..d)
        .map(|_| (spec.domain_shift_strength * (rng.random::<f64>() - 0.5)).exp())
        .collect();

    let source_protos = centered_prototypes(&mut rng, spec.num_identities_source, d);
    let target_protos = centered_prototypes(&mut rng, spec.num_identities_target, d);

    let gap = spec.modality_gap_strength;
    let observe = |rng: &mut ChaCha8Rng, proto: &[f64], modality: Modality, domain: Domain| {
        let map = &maps[modality as usize];
        let mut x: Vec<f64> = proto.to_vec();
        if gap > 0.0 {
            for (i, xi) in x.iter_mut().enumerate() {
                let rotated = crate::numerics::dot(&map.rotation[i], proto);
                *xi += gap * (rotated + map.bias[i]);
            }
        }
        if domain == Domain::Target {
            for ((xi, s), o) in x.iter_mut().zip(&scales).zip(&offset) {
                *xi = *xi * s + o;
            }
        }
        if spec.noise_sigma > 0.0 {
            for xi in x.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *xi += spec.noise_sigma * n;
            }
        }
        x
    };

    let spi = spec.samples_per_identity_per_modality;
    let mut source = Vec::with_capacity(spec.num_identities_source * spi);
    for (id, proto) in source_protos.iter().enumerate() {
        for _ in 0..spi {
            let image = observe(&mut rng, proto, Modality::Image, Domain::Source);
            let text = observe(&mut rng, proto, Modality::Text, Domain::Source);
            let mk = |raw, modality| Sample {
                raw,
                identity: id as u32,
                modality,
                domain: Domain::Source,
            };
            source.push(SourcePair {
                image: mk(image, Modality::Image),
                text: mk(text, Modality::Text),
            });
        }
    }

    let mut target_images = Vec::new();
    let mut target_texts = Vec::new();
    for (id, proto) in target_protos.iter().enumerate() {
        for _ in 0..spi {
            target_images.push((id as u32, observe(&mut rng, proto, Modality::Image, Domain::Target)));
        }
        for _ in 0..spi {
            target_texts.push((id as u32, observe(&mut rng, proto, Modality::Text, Domain::Target)));
        }
    }
    target_images.shuffle(&mut rng);
    target_texts.shuffle(&mut rng);

    let split = |items: Vec<(u32, Vec<f64>)>, modality| -> (Vec<u32>, Vec<UnlabeledSample>) {
        items
            .into_iter()
            .map(|(id, raw)| (id, UnlabeledSample { raw, modality }))
            .unzip()
    };
    let (image_ids, images) = split(target_images, Modality::Image);
    let (text_ids, texts) = split(target_texts, Modality::Text);

    Ok(Generated {
        source,
        target: TargetSet { images, texts },
        ground_truth: TargetGroundTruth { image_ids, text_ids },
    })
}

/// Index batches over `len` items for one shuffled epoch; the final batch may
/// be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batch_iter<T>(
    set: &[T],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&T>>> {
    let batches = batch_indices(set.len(), batch_size, seed)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &set[i]).collect()))
}

// ---------------------------------------------------------------------------
// Record files
// ---------------------------------------------------------------------------

const RECORD_MAGIC: &str = "# gckd-records v1";

/// One line of a record file: `domain modality identity v1 v2 ...`, with `-`
/// standing for a withheld identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub domain: Domain,
    pub modality: Modality,
    pub identity: Option<u32>,
    pub raw: Vec<f64>,
}

pub fn write_records<'a, W: Write>(
    mut w: W,
    fingerprint: &str,
    records: impl IntoIterator<Item = (Domain, Modality, Option<u32>, &'a [f64])>,
) -> Result<usize> {
    writeln!(w, "{RECORD_MAGIC} fingerprint={fingerprint}")?;
    let mut n = 0;
    for (domain, modality, identity, raw) in records {
        write!(w, "{} {} ", domain.as_str(), modality.as_str())?;
        match identity {
            Some(id) => write!(w, "{id}")?,
            None => write!(w, "-")?,
        }
        for v in raw {
            // `{}` on f64 is the shortest representation that round-trips
            write!(w, " {v}")?;
        }
        writeln!(w)?;
        n += 1;
    }
    Ok(n)
}

fn parse_header(line: &str) -> Result<String> {
    line.strip_prefix(RECORD_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("fingerprint="))
        .map(str::to_owned)
        .ok_or_else(|| Error::Format(format!("bad record header: {line:?}")))
}

/// Reads a record file, returning its fingerprint and records.
pub fn read_records<R: BufRead>(r: R) -> Result<(String, Vec<Record>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty record file".into()))??;
    let fingerprint = parse_header(&header)?;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", n + 2));
        let mut fields = line.split_ascii_whitespace();
        let domain = match fields.next() {
            Some("source") => Domain::Source,
            Some("target") => Domain::Target,
            _ => return Err(bad("unknown domain")),
        };
        let modality = match fields.next() {
            Some("image") => Modality::Image,
            Some("text") => Modality::Text,
            _ => return Err(bad("unknown modality")),
        };
        let identity = match fields.next() {
            Some("-") => None,
            Some(s) => Some(s.parse().map_err(|_| bad("bad identity"))?),
            None => return Err(bad("missing identity")),
        };
        let raw = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        out.push(Record {
            domain,
            modality,
            identity,
            raw,
        });
    }
    Ok((fingerprint, out))
}

pub fn write_source<W: Write>(w: W, fingerprint: &str, source: &[SourcePair]) -> Result<usize> {
    write_records(
        w,
        fingerprint,
        source.iter().flat_map(|p| {
            [&p.image, &p.text]
                .map(|s| (s.domain, s.modality, Some(s.identity), s.raw.as_slice()))
        }),
    )
}

/// Target records are written without identities.
pub fn write_target<W: Write>(w: W, fingerprint: &str, target: &TargetSet) -> Result<usize> {
    write_records(
        w,
        fingerprint,
        target
            .images
            .iter()
            .chain(&target.texts)
            .map(|s| (Domain::Target, s.modality, None, s.raw.as_slice())),
    )
}

pub fn write_ground_truth<W: Write>(
    mut w: W,
    fingerprint: &str,
    truth: &TargetGroundTruth,
) -> Result<()> {
    writeln!(w, "# gckd-truth v1 fingerprint={fingerprint}")?;
    for (i, id) in truth.image_ids.iter().enumerate() {
        writeln!(w, "image {i} {id}")?;
    }
    for (i, id) in truth.text_ids.iter().enumerate() {
        writeln!(w, "text {i} {id}")?;
    }
    Ok(())
}

pub fn read_source<R: BufRead>(r: R) -> Result<(String, Vec<SourcePair>)> {
    let (fp, records) = read_records(r)?;
    if records.len() % 2 != 0 {
        return Err(Error::Format("source file holds an odd number of records".into()));
    }
    let to_sample = |rec: Record| -> Result<Sample> {
        if rec.domain != Domain::Source {
            return Err(Error::Format("target record in source file".into()));
        }
        Ok(Sample {
            identity: rec
                .identity
                .ok_or_else(|| Error::Format("source record without identity".into()))?,
            raw: rec.raw,
            modality: rec.modality,
            domain: rec.domain,
        })
    };
    let mut pairs = Vec::with_capacity(records.len() / 2);
    let mut it = records.into_iter();
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        let (image, text) = (to_sample(a)?, to_sample(b)?);
        if image.modality != Modality::Image
            || text.modality != Modality::Text
            || image.identity != text.identity
        {
            return Err(Error::Format("source records are not aligned image/text pairs".into()));
        }
        pairs.push(SourcePair { image, text });
    }
    Ok((fp, pairs))
}

pub fn read_target<R: BufRead>(r: R) -> Result<(String, TargetSet)> {
    let (fp, records) = read_records(r)?;
    let mut set = TargetSet::default();
    for rec in records {
        if rec.domain != Domain::Target {
            return Err(Error::Format("source record in target file".into()));
        }
        let sample = UnlabeledSample {
            raw: rec.raw,
            modality: rec.modality,
        };
        match rec.modality {
            Modality::Image => set.images.push(sample),
            Modality::Text => set.texts.push(sample),
        }
    }
    Ok((fp, set))
}

pub fn read_ground_truth<R: BufRead>(r: R) -> Result<(String, TargetGroundTruth)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty truth file".into()))??;
    let fp = header
        .strip_prefix("# gckd-truth v1 fingerprint=")
        .ok_or_else(|| Error::Format(format!("bad truth header: {header:?}")))?
        .trim()
        .to_owned();
    let mut truth = TargetGroundTruth::default();
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split_ascii_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("bad truth line {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        let idx: usize = f[1].parse().map_err(|_| bad())?;
        let id: u32 = f[2].parse().map_err(|_| bad())?;
        let list = match f[0] {
            "image" => &mut truth.image_ids,
            "text" => &mut truth.text_ids,
            _ => return Err(bad()),
        };
        if idx != list.len() {
            return Err(bad());
        }
        list.push(id);
    }
    Ok((fp, truth))
}
