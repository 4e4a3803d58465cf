use std::path::Path;

use anyhow::{bail, Context, Result};
use dspr_core::data::{gen_conservation, gen_transport_delay, ConservationConfig, TransportDelayConfig};

use crate::settings::Settings;
use crate::{GenerateArgs, Kind};

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} exists and is not empty (pass --force to overwrite)", dir.display());
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn run(a: GenerateArgs, s: &Settings) -> Result<()> {
    let kind: Kind = s.require(a.kind, "kind")?;
    let out: std::path::PathBuf = s.require(a.out, "out")?;
    let seed = s.seed(a.seed)?;
    let force = s.switch(a.force, "force")?;

    let ds = match kind {
        Kind::TransportDelay => {
            let d = TransportDelayConfig::default();
            gen_transport_delay(&TransportDelayConfig {
                seed,
                n_steps: s.get(a.n_steps, "n_steps", d.n_steps)?,
                noise_std: s.get(a.noise_std, "noise_std", d.noise_std)?,
                ..d
            })?
        }
        Kind::Conservation => {
            let d = ConservationConfig::default();
            gen_conservation(&ConservationConfig {
                seed,
                n_steps: s.get(a.n_steps, "n_steps", d.n_steps)?,
                noise_std: s.get(a.noise_std, "noise_std", d.noise_std)?,
                leak: s.get(a.leak, "leak", d.leak)?,
                delay: s.get(a.delay, "delay", d.delay)?,
                ..d
            })?
        }
    };
    ds.prior.validate()?;
    prepare_out_dir(&out, force)?;
    ds.save_dir(&out)?;
    println!(
        "wrote {} steps x {} variables to {}",
        ds.n_steps(),
        ds.n_vars(),
        out.display()
    );
    Ok(())
}
