//! Little-endian binary checkpoints.
//!
//! Layout: the 8-byte magic `GCKDCKPT`, a `u32` version, a `u8` kind
//! (0 = parameters only, 1 = full training state) and the config fingerprint
//! as a length-prefixed UTF-8 string. A parameter block stores the layer
//! count of each group (image, text, propagation, head) and then, per layer,
//! `d_in`, `d_out`, the row-major weight and the bias. Every count is a
//! `u64` and every value an `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::distillation::TeacherStudentPair;
use crate::encoder::{Dense, EncoderParams, Mlp};
use crate::error::{Error, Result};
use crate::losses::MatchingHead;
use crate::memory::{MemoryBank, MemoryBanks, MemoryEntry};
use crate::model::ModelParams;
use crate::numerics::Matrix;
use crate::optim::AdamW;
use crate::synth_data::{Domain, Modality};
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"GCKDCKPT";
const VERSION: u32 = 1;
const KIND_PARAMS: u8 = 0;
const KIND_STATE: u8 = 1;
/// Refuse absurd lengths instead of attempting huge allocations.
const MAX_LEN: u64 = 1 << 32;

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.0.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        Ok(self.0.write_all(b)?)
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(Error::Format(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf).map_err(|_| Error::Format("checkpoint is truncated".into()))?;
        Ok(buf)
    }
}

fn write_layers<W: Write>(out: &mut Out<W>, layers: &[Dense]) -> Result<()> {
    for l in layers {
        out.u64(l.d_in() as u64)?;
        out.u64(l.d_out() as u64)?;
        out.f64s(l.weight.data())?;
        out.f64s(&l.bias)?;
    }
    Ok(())
}

fn read_layers<R: Read>(inp: &mut In<R>, count: usize) -> Result<Vec<Dense>> {
    (0..count)
        .map(|_| {
            let (d_in, d_out) = (inp.len()?, inp.len()?);
            let weight = inp.f64s(d_in * d_out)?;
            let bias = inp.f64s(d_out)?;
            Ok(Dense {
                weight: Matrix::new(d_in, d_out, weight).map_err(|e| Error::Format(e.to_string()))?,
                bias,
            })
        })
        .collect()
}

fn write_params_block<W: Write>(out: &mut Out<W>, p: &ModelParams) -> Result<()> {
    let groups: [&[Dense]; 4] = [&p.encoders.image.layers, &p.encoders.text.layers, &p.gnn, &p.head.mlp.layers];
    for g in groups {
        out.u64(g.len() as u64)?;
    }
    for g in groups {
        write_layers(out, g)?;
    }
    Ok(())
}

fn read_params_block<R: Read>(inp: &mut In<R>) -> Result<ModelParams> {
    let counts = [inp.len()?, inp.len()?, inp.len()?, inp.len()?];
    let image = Mlp { layers: read_layers(inp, counts[0])? };
    let text = Mlp { layers: read_layers(inp, counts[1])? };
    let gnn = read_layers(inp, counts[2])?;
    let head = MatchingHead {
        mlp: Mlp { layers: read_layers(inp, counts[3])? },
    };
    for mlp in [&image, &text, &head.mlp] {
        mlp.check_chain().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(ModelParams {
        encoders: EncoderParams { image, text },
        gnn,
        head,
    })
}

fn write_header<W: Write>(out: &mut Out<W>, kind: u8, fingerprint: &str) -> Result<()> {
    out.0.write_all(MAGIC)?;
    out.0.write_all(&VERSION.to_le_bytes())?;
    out.u8(kind)?;
    out.bytes(fingerprint.as_bytes())
}

fn read_header<R: Read>(inp: &mut In<R>) -> Result<(u8, String)> {
    if &inp.exact::<8>()? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(inp.exact()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = inp.u8()?;
    let fp = String::from_utf8(inp.bytes()?).map_err(|_| Error::Format("fingerprint is not UTF-8".into()))?;
    Ok((kind, fp))
}

pub fn write_params<W: Write>(w: W, params: &ModelParams, fingerprint: &str) -> Result<()> {
    let mut out = Out(w);
    write_header(&mut out, KIND_PARAMS, fingerprint)?;
    write_params_block(&mut out, params)
}

fn write_bank<W: Write>(out: &mut Out<W>, b: &MemoryBank) -> Result<()> {
    out.u64(b.capacity() as u64)?;
    out.u64(b.dim() as u64)?;
    out.u64(b.write_cursor() as u64)?;
    out.u64(b.ring().len() as u64)?;
    for e in b.ring() {
        out.u64(e.iteration)?;
        out.f64s(&e.embedding)?;
    }
    Ok(())
}

fn read_bank<R: Read>(inp: &mut In<R>, domain: Domain, modality: Modality) -> Result<MemoryBank> {
    let (capacity, dim, cursor, len) = (inp.len()?, inp.len()?, inp.len()?, inp.len()?);
    let slots = (0..len)
        .map(|_| {
            let iteration = inp.u64()?;
            Ok(MemoryEntry {
                iteration,
                embedding: inp.f64s(dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::from_ring(domain, modality, capacity, dim, slots, cursor)
}

const BANK_ORDER: [(Domain, Modality); 4] = [
    (Domain::Source, Modality::Image),
    (Domain::Target, Modality::Image),
    (Domain::Source, Modality::Text),
    (Domain::Target, Modality::Text),
];

pub fn write_state<W: Write>(w: W, state: &TrainState, fingerprint: &str) -> Result<()> {
    let mut out = Out(w);
    write_header(&mut out, KIND_STATE, fingerprint)?;
    write_params_block(&mut out, state.pair.student())?;
    write_params_block(&mut out, state.pair.teacher())?;
    out.f64s(&[state.pair.momentum(), state.optimizer.weight_decay])?;
    out.u64(state.optimizer.steps)?;
    write_params_block(&mut out, &state.optimizer.m)?;
    write_params_block(&mut out, &state.optimizer.v)?;
    out.u64(state.iteration)?;
    out.u64(state.total_steps)?;
    out.0.write_all(&state.rng.get_seed())?;
    out.u64(state.rng.get_stream())?;
    out.0.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    for (d, m) in BANK_ORDER {
        write_bank(&mut out, state.banks.get(d, m))?;
    }
    Ok(())
}

/// What a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Params(ModelParams),
    State(Box<TrainState>),
}

impl Checkpoint {
    /// The student parameters, whichever kind this is.
    pub fn student(&self) -> &ModelParams {
        match self {
            Checkpoint::Params(p) => p,
            Checkpoint::State(s) => s.student(),
        }
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(String, Checkpoint)> {
    let mut inp = In(r);
    let (kind, fp) = read_header(&mut inp)?;
    let ckpt = match kind {
        KIND_PARAMS => Checkpoint::Params(read_params_block(&mut inp)?),
        KIND_STATE => {
            let student = read_params_block(&mut inp)?;
            let teacher = read_params_block(&mut inp)?;
            let (momentum, weight_decay) = (inp.f64()?, inp.f64()?);
            let steps = inp.u64()?;
            let m = read_params_block(&mut inp)?;
            let v = read_params_block(&mut inp)?;
            let iteration = inp.u64()?;
            let total_steps = inp.u64()?;
            let seed: [u8; 32] = inp.exact()?;
            let stream = inp.u64()?;
            let word_pos = u128::from_le_bytes(inp.exact()?);
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            let mut banks = Vec::with_capacity(4);
            for (d, mo) in BANK_ORDER {
                banks.push(read_bank(&mut inp, d, mo)?);
            }
            let mut it = banks.into_iter();
            let mut next = || it.next().expect("four banks");
            let banks = MemoryBanks {
                source_image: next(),
                target_image: next(),
                source_text: next(),
                target_text: next(),
            };
            for p in [&teacher, &m, &v] {
                student.check_same_structure(p).map_err(|e| Error::Format(e.to_string()))?;
            }
            Checkpoint::State(Box::new(TrainState {
                pair: TeacherStudentPair::from_parts(student, teacher, momentum)?,
                banks,
                optimizer: AdamW {
                    weight_decay,
                    m,
                    v,
                    steps,
                },
                iteration,
                total_steps,
                rng,
            }))
        }
        other => return Err(Error::Format(format!("unknown checkpoint kind {other}"))),
    };
    let mut probe = [0u8; 1];
    if inp.0.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((fp, ckpt))
}

pub fn save_state(path: &Path, state: &TrainState, fingerprint: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_state(&mut w, state, fingerprint)?;
    Ok(w.flush()?)
}

pub fn save_params(path: &Path, params: &ModelParams, fingerprint: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params, fingerprint)?;
    Ok(w.flush()?)
}

pub fn load(path: &Path) -> Result<(String, Checkpoint)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
