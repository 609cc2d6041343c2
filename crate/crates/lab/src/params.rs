//! Text parameter files for generative models and reward ensembles.
//!
//! ```text
//! querysynth-params v1
//! kind ensemble
//! rewards 1 -10 0
//! featurizer next-state
//! net member0 sizes 2 32 32 3 activation tanh head softmax values 1315
//! 0.0132...
//! ```
//!
//! A header line names the kind, then `key value...` lines give scalar
//! settings, then each network is a `net` line followed by exactly `values`
//! floats, one per line. Floats use the shortest round-trip decimal form, so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use querysynth_core::generative::{ClassModel, GenerativeModel, NavModel};
use querysynth_core::numerics::{Activation, Arch, Head, Mlp};
use querysynth_core::reward_model::{Featurizer, RewardEnsemble, RewardModel};

pub const MAGIC: &str = "querysynth-params v1";

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        "identity" => Activation::Identity,
        _ => bail!("unknown activation {s:?}"),
    })
}

fn featurizer_name(f: Featurizer) -> &'static str {
    match f {
        Featurizer::NextState => "next-state",
        Featurizer::Latent => "latent",
    }
}

fn parse_featurizer(s: &str) -> Result<Featurizer> {
    Ok(match s {
        "next-state" => Featurizer::NextState,
        "latent" => Featurizer::Latent,
        _ => bail!("unknown featurizer {s:?}"),
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_net(out: &mut String, name: &str, net: &Mlp) {
    let arch = net.arch();
    let sizes = arch.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
    let head = match arch.head {
        Head::Linear => "linear",
        Head::Softmax => "softmax",
    };
    let _ = writeln!(out, "net {name} sizes {sizes} activation {} head {head} values {}", activation_name(arch.activation), net.num_params());
    for v in net.values() {
        let _ = writeln!(out, "{v}");
    }
}

pub fn write_generative(model: &GenerativeModel) -> String {
    let mut out = format!("{MAGIC}\n");
    match model {
        GenerativeModel::Nav(m) => {
            out.push_str("kind nav\n");
            let _ = writeln!(out, "start {}", join(&m.start));
            let _ = writeln!(out, "sigma {}", m.sigma);
        }
        GenerativeModel::Class(m) => {
            out.push_str("kind class\n");
            write_net(&mut out, "encoder", &m.encoder);
            write_net(&mut out, "decoder", &m.decoder);
        }
    }
    out
}

pub fn write_ensemble(ensemble: &RewardEnsemble) -> String {
    let mut out = format!("{MAGIC}\nkind ensemble\n");
    let _ = writeln!(out, "rewards {}", join(ensemble.rewards()));
    let _ = writeln!(out, "featurizer {}", featurizer_name(ensemble.featurizer()));
    for (i, m) in ensemble.members().iter().enumerate() {
        write_net(&mut out, &format!("member{i}"), m);
    }
    out
}

/// Parsed file before it is assembled into a model.
struct Parsed {
    kind: String,
    scalars: Vec<(String, Vec<String>)>,
    nets: Vec<(String, Mlp)>,
}

impl Parsed {
    fn scalar(&self, key: &str) -> Result<&[String]> {
        self.scalars.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice()).ok_or_else(|| anyhow!("missing `{key}` line"))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        self.scalar(key)?.iter().map(|v| v.parse::<f64>().with_context(|| format!("`{key}`: bad number {v:?}"))).collect()
    }

    fn net(&mut self, name: &str) -> Result<Mlp> {
        let i = self.nets.iter().position(|(n, _)| n == name).ok_or_else(|| anyhow!("missing net `{name}`"))?;
        Ok(self.nets.remove(i).1)
    }
}

fn parse_net_header(fields: &[&str]) -> Result<(String, Arch, usize)> {
    let name = fields.first().ok_or_else(|| anyhow!("net line without a name"))?.to_string();
    let key = |k: &str| fields.iter().position(|f| *f == k).ok_or_else(|| anyhow!("net {name}: missing `{k}`"));
    let (s, a, h, v) = (key("sizes")?, key("activation")?, key("head")?, key("values")?);
    if !(s < a && a + 2 == h && h + 2 == v && v + 2 == fields.len()) {
        bail!("net {name}: expected `sizes .. activation A head H values N`");
    }
    let sizes = fields[s + 1..a].iter().map(|f| f.parse::<usize>().with_context(|| format!("net {name}: bad size {f:?}"))).collect::<Result<Vec<_>>>()?;
    let head = match fields[h + 1] {
        "linear" => Head::Linear,
        "softmax" => Head::Softmax,
        other => bail!("net {name}: unknown head {other:?}"),
    };
    let arch = Arch::new(sizes, parse_activation(fields[a + 1])?, head).map_err(|e| anyhow!("net {name}: {e}"))?;
    let count = fields[v + 1].parse::<usize>().with_context(|| format!("net {name}: bad value count"))?;
    Ok((name, arch, count))
}

fn parse(text: &str) -> Result<Parsed> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => bail!("not a parameter file: the first line must be `{MAGIC}`"),
    }
    let kind = match lines.next() {
        Some((_, l)) => match l.split_whitespace().collect::<Vec<_>>()[..] {
            ["kind", k] => k.to_string(),
            _ => bail!("second line must be `kind <nav|class|ensemble>`"),
        },
        None => bail!("missing kind line"),
    };
    let mut parsed = Parsed { kind, scalars: Vec::new(), nets: Vec::new() };
    while let Some((no, line)) = lines.next() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "net" {
            let (name, arch, count) = parse_net_header(&fields[1..]).with_context(|| format!("line {}", no + 1))?;
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let (vno, v) = lines.next().ok_or_else(|| anyhow!("net {name}: file ends after {} of {count} values", values.len()))?;
                values.push(v.trim().parse::<f64>().with_context(|| format!("line {}: bad number {v:?}", vno + 1))?);
            }
            let net = Mlp::from_values(arch, values).map_err(|e| anyhow!("net {name}: {e}"))?;
            parsed.nets.push((name, net));
        } else {
            parsed.scalars.push((fields[0].to_string(), fields[1..].iter().map(|f| f.to_string()).collect()));
        }
    }
    Ok(parsed)
}

pub fn read_generative(text: &str) -> Result<GenerativeModel> {
    let mut p = parse(text)?;
    match p.kind.as_str() {
        "nav" => {
            let start = p.floats("start")?;
            let sigma = p.floats("sigma")?;
            let (&[x, y], &[sigma]) = (start.as_slice(), sigma.as_slice()) else {
                bail!("nav model needs `start x y` and `sigma s`");
            };
            Ok(GenerativeModel::Nav(NavModel { start: [x, y], sigma }))
        }
        "class" => {
            let encoder = p.net("encoder")?;
            let decoder = p.net("decoder")?;
            Ok(GenerativeModel::Class(ClassModel { encoder, decoder }))
        }
        other => bail!("expected a generative model, found kind {other:?}"),
    }
}

pub fn read_ensemble(text: &str) -> Result<RewardEnsemble> {
    let p = parse(text)?;
    if p.kind != "ensemble" {
        bail!("expected an ensemble, found kind {:?}", p.kind);
    }
    let rewards = p.floats("rewards")?;
    let featurizer = match p.scalar("featurizer")? {
        [f] => parse_featurizer(f)?,
        _ => bail!("`featurizer` takes one value"),
    };
    let members = p.nets.into_iter().map(|(_, m)| m).collect();
    RewardEnsemble::new(members, rewards, featurizer).map_err(|e| anyhow!("{e}"))
}
