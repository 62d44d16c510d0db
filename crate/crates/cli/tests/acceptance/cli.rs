//! Every command, run twice with the same seed, writes byte-identical files
//! and prints byte-identical output. The second run also uses a one-thread
//! pool, so results cannot depend on the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use crate::support::{Context, Outcome};

const SPECS: [(&str, &str); 9] = [
    ("blobs.json", r#"{"family":"blobs2d","k":2,"n":200,"separation":10,"seed":3}"#),
    (
        "ppca.json",
        r#"{"family":"ppca","params":{"w":[[1.0],[0.5],[-0.3]],"mu":[0.1,0.2,0.3],"sigma2":0.2},"n":150,"seed":1}"#,
    ),
    (
        "lca.json",
        r#"{"family":"lca","params":{"weights":[0.4,0.6],"item_probs":[[[0.9,0.1],[0.8,0.2],[0.7,0.2,0.1]],[[0.2,0.8],[0.1,0.9],[0.1,0.1,0.8]]]},"n":200,"seed":2}"#,
    ),
    ("irt.json", r#"{"family":"irt","params":{"a":[1.0,1.5,0.8,1.2],"b":[-1.0,0.0,0.5,1.0]},"n":300,"seed":4}"#),
    (
        "lda.json",
        r#"{"family":"lda","hyper":{"alpha":[0.5,0.5],"beta":[0.1,0.1,0.1,0.1,0.1,0.1]},"doc_lengths":[20,20,20,20,20,20],"seed":5}"#,
    ),
    (
        "hmm.json",
        r#"{"family":"hmm","params":{"pi":[0.5,0.5],"trans":[[0.9,0.1],[0.2,0.8]],"emit":{"kind":"discrete","states":[[0.8,0.1,0.1],[0.1,0.1,0.8]]}},"lengths":[50,50],"seed":6}"#,
    ),
    (
        "ghmm.json",
        r#"{"family":"ghmm","params":{"pi":[0.5,0.5],"trans":[[0.9,0.1],[0.2,0.8]],"emit":{"kind":"gaussian","states":[{"mean":[0.0],"cov":[[1.0]]},{"mean":[4.0],"cov":[[1.0]]}]}},"lengths":[60,60],"seed":7}"#,
    ),
    (
        "lds.json",
        r#"{"family":"lds","params":{"a":[[0.9]],"c":[[1.0],[0.5]],"q":[[0.1]],"r":[[0.2,0.0],[0.0,0.2]],"mu0":[0.0],"sigma0":[[1.0]]},"lengths":[40,40],"seed":8}"#,
    ),
    ("mix.json", r#"{"family":"mixture1d","weights":[0.5,0.5],"means":[-2,2],"sds":[0.5,0.5],"n":200,"seed":9}"#),
];

const COMMANDS: &[&str] = &[
    "synth blobs.json --out blobs.csv",
    "synth ppca.json --out ppca.csv",
    "synth lca.json --out lca.csv",
    "synth irt.json --out irt.csv",
    "synth lda.json --out lda.txt",
    "synth hmm.json --out hmm.seq",
    "synth ghmm.json --out ghmm.seq",
    "synth lds.json --out lds.seq",
    "synth mix.json --out mix.csv",
    "fit gmm --data blobs.csv --out gmm.json --k 2 --seed 7",
    "eval gmm.json --data blobs.csv",
    "infer gmm.json --data blobs.csv --out gmm.post.csv",
    "sample gmm.json --n 40 --out gmm.sample.csv --seed 3",
    "fit ppca --data ppca.csv --out ppca.model.json --latent-dim 1 --method em --seed 2",
    "eval ppca.model.json --data ppca.csv",
    "infer ppca.model.json --data ppca.csv --out ppca.post.csv",
    "reconstruct ppca.model.json --data ppca.csv --out ppca.rec.csv",
    "sample ppca.model.json --n 3 --out ppca.given.csv --from posterior --given ppca.csv --seed 4",
    "fit lca --data lca.csv --out lca.model.json --k 2 --seed 5",
    "infer lca.model.json --data lca.csv --out lca.post.csv",
    "sample lca.model.json --n 30 --out lca.sample.csv --seed 5",
    "fit irt --data irt.csv --out irt.model.json --seed 6",
    "eval irt.model.json --data irt.csv",
    "infer irt.model.json --data irt.csv --out irt.post.csv",
    "fit lda --data lda.txt --out lda.model.json --k 2 --seed 7",
    "eval lda.model.json --data lda.txt",
    "infer lda.model.json --data lda.txt --out lda.post.csv",
    "sample lda.model.json --n 4 --length 10 --out lda.sample.txt --seed 7",
    "fit hmm --data hmm.seq --out hmm.model.json --k 2 --seed 8",
    "infer hmm.model.json --data hmm.seq --out hmm.post.csv",
    "sample hmm.model.json --n 2 --length 20 --out hmm.sample.seq --seed 8",
    "fit ghmm --data ghmm.seq --out ghmm.model.json --k 2 --seed 9",
    "eval ghmm.model.json --data ghmm.seq",
    "fit lds --data lds.seq --out lds.model.json --latent-dim 1 --seed 10 --max-iters 50",
    "infer lds.model.json --data lds.seq --out lds.post.csv",
    "sample lds.model.json --n 2 --length 15 --out lds.sample.seq --seed 10",
    "fit vae --data mix.csv --out vae.model.json --epochs 5 --seed 11",
    "eval vae.model.json --data mix.csv --samples 5 --seed 11",
    "reconstruct vae.model.json --data mix.csv --out vae.rec.csv",
    "sample vae.model.json --n 20 --out vae.sample.csv --seed 11",
    "fit flow --data mix.csv --out flow.model.json --epochs 5 --seed 12",
    "infer flow.model.json --data mix.csv --out flow.post.csv",
    "sample flow.model.json --n 20 --out flow.sample.csv --seed 12",
    "fit diffusion --data mix.csv --out diffusion.model.json --T 10 --epochs 5 --seed 13",
    "eval diffusion.model.json --data mix.csv --samples 3 --seed 13",
    "sample diffusion.model.json --n 20 --out diffusion.sample.csv --seed 13",
    "fit arm --data lca.csv --out arm.model.json --epochs 5 --seed 14",
    "eval arm.model.json --data lca.csv",
    "sample arm.model.json --n 20 --out arm.sample.csv --seed 14",
    "fit gan --data mix.csv --out gan.model.json --steps-gan 50 --seed 15",
    "sample gan.model.json --n 20 --out gan.sample.csv --seed 15",
];

/// Runs every command in `dir` and returns each command's stdout followed by
/// the bytes of every file left in `dir`.
fn run_all(dir: &Path, threads: Option<&str>) -> Result<BTreeMap<String, Vec<u8>>, String> {
    for (name, body) in SPECS {
        fs::write(dir.join(name), body).ctx(name)?;
    }
    let mut out = BTreeMap::new();
    for (i, line) in COMMANDS.iter().enumerate() {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_latentlab"));
        cmd.args(line.split_whitespace()).current_dir(dir).env_remove("LATENTLAB_THREADS");
        if let Some(n) = threads {
            cmd.env("LATENTLAB_THREADS", n);
        }
        let res = cmd.output().ctx(line)?;
        ensure!(
            res.status.success(),
            "`latentlab {line}` failed ({}): {}",
            res.status,
            String::from_utf8_lossy(&res.stderr).trim()
        );
        out.insert(format!("{i:02} stdout of `{line}`"), res.stdout);
    }
    for entry in fs::read_dir(dir).ctx("read dir")? {
        let path = entry.ctx("dir entry")?.path();
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).ctx("read output")?);
    }
    Ok(out)
}

pub fn criterion() -> Outcome {
    let (a, b) = (tempfile::tempdir().ctx("tempdir")?, tempfile::tempdir().ctx("tempdir")?);
    let first = run_all(a.path(), None)?;
    let second = run_all(b.path(), Some("1"))?;
    ensure!(
        first.keys().eq(second.keys()),
        "runs produced different file sets: {:?} vs {:?}",
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &first {
        ensure!(&second[name] == bytes, "{name} differs between runs");
    }
    let files = first.keys().filter(|k| !k.contains("stdout")).count();
    Ok(format!("{} commands, {files} files byte-identical across runs and thread counts", COMMANDS.len()))
}
