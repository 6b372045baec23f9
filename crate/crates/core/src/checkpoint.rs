//! Checkpoint container: a `manifest.txt` describing every network and tensor,
//! plus one flat binary file per network holding its tensors back to back as
//! little-endian `f64`, row-major, in manifest order.
//!
//! ```text
//! dyna-loco-checkpoint 1
//! iteration 200
//! network actor input=20 hidden=128,128 output=4 activation=elu seed=17 file=actor.bin
//! tensor actor.bin actor.0.weight 128 20
//! tensor actor.bin actor.0.bias 128 1
//! ...
//! scalar model.input_norm.count 6400
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dyna::{Normalizer, PredictiveModel};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp, MlpSpec};
use crate::policy::{Actor, Critic};
use crate::scalar::Real;

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub iteration: u64,
    pub actor: Actor<S>,
    pub actor_seed: u64,
    pub critic: Critic<S>,
    pub critic_seed: u64,
    pub model: Option<(PredictiveModel<S>, u64)>,
}

struct Writer {
    manifest: String,
    files: BTreeMap<String, Vec<u8>>,
}

impl Writer {
    fn network(&mut self, name: &str, spec: &MlpSpec, seed: u64) {
        let hidden: Vec<String> = spec.hidden_dims.iter().map(|h| h.to_string()).collect();
        writeln!(
            self.manifest,
            "network {name} input={} hidden={} output={} activation={} seed={seed} file={name}.bin",
            spec.input_dim,
            hidden.join(","),
            spec.output_dim,
            spec.activation.name()
        )
        .unwrap();
    }

    fn tensor<S: Real>(&mut self, file: &str, name: &str, rows: usize, cols: usize, data: impl Iterator<Item = S>) {
        writeln!(self.manifest, "tensor {file} {name} {rows} {cols}").unwrap();
        let buf = self.files.entry(file.to_string()).or_default();
        for v in data {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }

    fn mlp<S: Real>(&mut self, name: &str, net: &Mlp<S>, seed: u64) {
        self.network(name, net.spec(), seed);
        let file = format!("{name}.bin");
        for (k, l) in net.layers().iter().enumerate() {
            let (o, i) = l.weight.dim();
            self.tensor(&file, &format!("{name}.{k}.weight"), o, i, l.weight.iter().copied());
            self.tensor(&file, &format!("{name}.{k}.bias"), o, 1, l.bias.iter().copied());
        }
    }

    fn normalizer<S: Real>(&mut self, file: &str, name: &str, n: &Normalizer<S>) {
        self.tensor(file, &format!("{name}.mean"), n.dim(), 1, n.mean().iter().copied());
        self.tensor(file, &format!("{name}.var"), n.dim(), 1, n.var().iter().copied());
        writeln!(self.manifest, "scalar {name}.count {:?}", n.count()).unwrap();
    }
}

pub fn save<S: Real>(dir: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = Writer { manifest: String::new(), files: BTreeMap::new() };
    writeln!(w.manifest, "dyna-loco-checkpoint {FORMAT_VERSION}").unwrap();
    writeln!(w.manifest, "iteration {}", ckpt.iteration).unwrap();
    w.mlp("actor", &ckpt.actor.mean, ckpt.actor_seed);
    w.tensor("actor.bin", "actor.log_std", ckpt.actor.log_std.len(), 1, ckpt.actor.log_std.iter().copied());
    w.mlp("critic", &ckpt.critic.value, ckpt.critic_seed);
    if let Some((model, seed)) = &ckpt.model {
        w.mlp("model", &model.net, *seed);
        w.normalizer("model.bin", "model.input_norm", &model.input_norm);
        w.normalizer("model.bin", "model.output_norm", &model.output_norm);
        writeln!(w.manifest, "scalar model.batch_size {}", model.batch_size).unwrap();
    }
    for (file, bytes) in &w.files {
        fs::write(dir.join(file), bytes)?;
    }
    fs::write(dir.join(MANIFEST), w.manifest)?;
    Ok(())
}

struct NetworkEntry {
    spec: MlpSpec,
    seed: u64,
}

struct Reader {
    networks: BTreeMap<String, NetworkEntry>,
    tensors: BTreeMap<String, (usize, usize, Vec<f64>)>,
    scalars: BTreeMap<String, String>,
    iteration: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_network(fields: &[&str]) -> Result<(String, NetworkEntry)> {
    let name = fields.first().ok_or_else(|| bad("network line without name"))?.to_string();
    let kv: BTreeMap<&str, &str> = fields[1..].iter().filter_map(|f| f.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("network {name}: missing {k}")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("network {name}: bad {k}"))) };
    let hidden = get("hidden")?
        .split(',')
        .map(|h| h.parse::<usize>().map_err(|_| bad(format!("network {name}: bad hidden"))))
        .collect::<Result<Vec<_>>>()?;
    let activation = Activation::parse(get("activation")?).ok_or_else(|| bad("unknown activation"))?;
    let spec = MlpSpec::new(num("input")?, hidden, num("output")?).with_activation(activation);
    let seed = get("seed")?.parse().map_err(|_| bad("bad seed"))?;
    Ok((name, NetworkEntry { spec, seed }))
}

impl Reader {
    fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest"))?;
        if header != format!("dyna-loco-checkpoint {FORMAT_VERSION}") {
            return Err(bad(format!("unsupported manifest header `{header}`")));
        }
        let mut r = Reader {
            networks: BTreeMap::new(),
            tensors: BTreeMap::new(),
            scalars: BTreeMap::new(),
            iteration: 0,
        };
        let mut blobs: BTreeMap<String, (Vec<u8>, usize)> = BTreeMap::new();
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["iteration", v] => r.iteration = v.parse().map_err(|_| bad("bad iteration"))?,
                ["network", rest @ ..] => {
                    let (name, entry) = parse_network(rest)?;
                    r.networks.insert(name, entry);
                }
                ["tensor", file, name, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| bad("bad rows"))?;
                    let cols: usize = cols.parse().map_err(|_| bad("bad cols"))?;
                    if !blobs.contains_key(*file) {
                        blobs.insert(file.to_string(), (fs::read(dir.join(file))?, 0));
                    }
                    let (bytes, offset) = blobs.get_mut(*file).expect("inserted");
                    let len = rows * cols * 8;
                    let chunk = bytes.get(*offset..*offset + len).ok_or_else(|| bad(format!("{file} is truncated")))?;
                    let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
                    *offset += len;
                    r.tensors.insert(name.to_string(), (rows, cols, data));
                }
                ["scalar", name, value] => {
                    r.scalars.insert(name.to_string(), value.to_string());
                }
                _ => return Err(bad(format!("unrecognised manifest line `{line}`"))),
            }
        }
        for (file, (bytes, used)) in &blobs {
            if bytes.len() != *used {
                return Err(bad(format!("{file} has {} trailing bytes", bytes.len() - used)));
            }
        }
        Ok(r)
    }

    fn tensor(&self, name: &str, rows: usize, cols: usize) -> Result<&[f64]> {
        let (r, c, data) = self.tensors.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if (*r, *c) != (rows, cols) {
            return Err(bad(format!("tensor {name} is {r}x{c}, expected {rows}x{cols}")));
        }
        Ok(data)
    }

    fn vector<S: Real>(&self, name: &str, len: usize) -> Result<Array1<S>> {
        Ok(self.tensor(name, len, 1)?.iter().map(|&v| S::lit(v)).collect())
    }

    fn mlp<S: Real>(&self, name: &str) -> Result<(Mlp<S>, u64)> {
        let entry = self.networks.get(name).ok_or_else(|| bad(format!("missing network {name}")))?;
        let layers = entry
            .spec
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| {
                let w = self.tensor(&format!("{name}.{k}.weight"), o, i)?;
                let weight = Array2::from_shape_vec((o, i), w.iter().map(|&v| S::lit(v)).collect())
                    .map_err(|e| bad(e.to_string()))?;
                let bias = self.vector(&format!("{name}.{k}.bias"), o)?;
                Ok(Dense { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Mlp::from_layers(entry.spec.clone(), layers)?, entry.seed))
    }

    fn scalar<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        self.scalars
            .get(name)
            .ok_or_else(|| bad(format!("missing scalar {name}")))?
            .parse()
            .map_err(|_| bad(format!("bad scalar {name}")))
    }

    fn normalizer<S: Real>(&self, name: &str, dim: usize) -> Result<Normalizer<S>> {
        Normalizer::from_parts(
            self.vector(&format!("{name}.mean"), dim)?,
            self.vector(&format!("{name}.var"), dim)?,
            self.scalar(&format!("{name}.count"))?,
        )
    }
}

pub fn load<S: Real>(dir: &Path) -> Result<Checkpoint<S>> {
    let r = Reader::open(dir)?;
    let (mean, actor_seed) = r.mlp::<S>("actor")?;
    let log_std = r.vector("actor.log_std", mean.spec().output_dim)?;
    let actor = Actor::from_parts(mean, log_std)?;
    let (value, critic_seed) = r.mlp::<S>("critic")?;
    let critic = Critic::from_net(value)?;
    let model = if r.networks.contains_key("model") {
        let (net, seed) = r.mlp::<S>("model")?;
        let in_dim = net.spec().input_dim;
        let out_dim = net.spec().output_dim;
        let mut model = PredictiveModel::from_net(net, r.scalar("model.batch_size")?)?;
        model.input_norm = r.normalizer("model.input_norm", in_dim)?;
        model.output_norm = r.normalizer("model.output_norm", out_dim)?;
        Some((model, seed))
    } else {
        None
    };
    Ok(Checkpoint { iteration: r.iteration, actor, actor_seed, critic, critic_seed, model })
}
