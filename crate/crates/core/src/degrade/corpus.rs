use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{make_icl_sample, TaskCatalog};
use super::spec::DegradationSpec;
use super::Image;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

/// Test corpora draw seeds at or above this value; training stays below it.
pub const TEST_SEED_BASE: u64 = 1 << 40;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6f6c_7631, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Training sample seed in `[0, TEST_SEED_BASE)`.
pub fn train_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(&[seed, stream, index]) % TEST_SEED_BASE
}

/// Held-out sample seed in `[TEST_SEED_BASE, 2·TEST_SEED_BASE)`.
pub fn test_seed(seed: u64, task: u64, index: u64) -> u64 {
    TEST_SEED_BASE + mix(&[seed, task, index, 0x7e57]) % TEST_SEED_BASE
}

/// Binary PPM (P6, 8-bit). Single-channel images are written as grey.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            let v = img.data()[ch.min(c - 1) * h * w + i];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Read a P6 file written by [`write_ppm`].
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated PPM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field `{s}`")));
    if fields[0] != "P6" || parse(&fields[3])? != 255 {
        return Err(Error::Format(format!("{}: not an 8-bit P6 file", path.display())));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| Error::Format("truncated PPM body".into()))?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = body[3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec([3, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub task: String,
    pub index: usize,
    pub seed: u64,
    pub spec: DegradationSpec,
    pub instruction: String,
    /// Paths relative to the manifest directory.
    pub lq: String,
    pub hq: String,
    pub lq_ppm: String,
    pub hq_ppm: String,
    /// `(lq, hq)` exemplar tensors for in-context tasks.
    #[serde(default)]
    pub exemplars: Vec<(String, String)>,
    /// Model output to score when no checkpoint is supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub image_size: usize,
    pub seed: u64,
    pub n_per_task: usize,
    pub icl_pairs: usize,
    pub tasks: Vec<String>,
    pub train_seed_range: (u64, u64),
    pub test_seed_range: (u64, u64),
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.check_disjoint()?;
        Ok(m)
    }

    /// Every entry seed lies in the held-out range, which does not overlap
    /// the training range.
    pub fn check_disjoint(&self) -> Result<()> {
        let (tr, te) = (self.train_seed_range, self.test_seed_range);
        if tr.1 > te.0 && te.1 > tr.0 {
            return Err(Error::contract("train and test seed ranges overlap"));
        }
        if let Some(e) = self.entries.iter().find(|e| e.seed < te.0 || e.seed >= te.1) {
            return Err(Error::contract(format!("entry seed {} outside the test range", e.seed)));
        }
        Ok(())
    }

    pub fn entries_for<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.task == task)
    }
}

/// Loaded tensors of one manifest entry.
pub struct LoadedEntry {
    pub lq: Image,
    pub hq: Image,
    pub exemplars: Vec<(Image, Image)>,
    pub output: Option<Image>,
}

impl ManifestEntry {
    pub fn load(&self, dir: &Path) -> Result<LoadedEntry> {
        let rd = |p: &str| read_tensor_file(dir.join(p));
        Ok(LoadedEntry {
            lq: rd(&self.lq)?,
            hq: rd(&self.hq)?,
            exemplars: self
                .exemplars
                .iter()
                .map(|(a, b)| Ok((rd(a)?, rd(b)?)))
                .collect::<Result<_>>()?,
            output: self.output.as_deref().map(rd).transpose()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TestsetSpec {
    pub tasks: Vec<String>,
    pub n_per_task: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Exemplar pairs per entry; in-context tasks always get at least one.
    pub icl_pairs: usize,
    pub config_hash: String,
}

fn write_image(dir: &Path, stem: &str, img: &Image) -> Result<(String, String)> {
    let olvt = format!("images/{stem}.olvt");
    let ppm = format!("images/{stem}.ppm");
    write_tensor_file(dir.join(&olvt), img)?;
    write_ppm(&dir.join(&ppm), img)?;
    Ok((olvt, ppm))
}

/// Generate the held-out corpus under `dir` and write `dir/manifest.json`.
pub fn build_testset(catalog: &TaskCatalog, spec: &TestsetSpec, dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::new();
    for task in &spec.tasks {
        let task_idx = catalog.index_of(task)? as u64;
        let def = catalog.get(task)?;
        let pairs = if def.in_context { spec.icl_pairs.max(1) } else { spec.icl_pairs };
        for i in 0..spec.n_per_task {
            let seed = test_seed(spec.seed, task_idx, i as u64);
            let sample = make_icl_sample(task, catalog, seed, spec.image_size, pairs)?;
            let q = &sample.query;
            let stem = format!("{task}_{i:04}");
            let (lq, lq_ppm) = write_image(dir, &format!("{stem}_lq"), &q.lq)?;
            let (hq, hq_ppm) = write_image(dir, &format!("{stem}_hq"), &q.hq)?;
            let exemplars = sample
                .exemplars
                .iter()
                .enumerate()
                .map(|(k, (a, b))| {
                    let a = write_image(dir, &format!("{stem}_ex{k}_lq"), a)?.0;
                    let b = write_image(dir, &format!("{stem}_ex{k}_hq"), b)?.0;
                    Ok((a, b))
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(ManifestEntry {
                task: task.clone(),
                index: i,
                seed,
                spec: q.spec.clone(),
                instruction: q.instruction.clone(),
                lq,
                hq,
                lq_ppm,
                hq_ppm,
                exemplars,
                output: None,
            });
        }
    }
    let manifest = Manifest {
        tool_version: crate::VERSION.to_string(),
        config_hash: spec.config_hash.clone(),
        image_size: spec.image_size,
        seed: spec.seed,
        n_per_task: spec.n_per_task,
        icl_pairs: spec.icl_pairs,
        tasks: spec.tasks.clone(),
        train_seed_range: (0, TEST_SEED_BASE),
        test_seed_range: (TEST_SEED_BASE, 2 * TEST_SEED_BASE),
        entries,
    };
    manifest.check_disjoint()?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Path of the manifest file inside a corpus directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(tasks: &[&str], n: usize) -> TestsetSpec {
        TestsetSpec {
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            n_per_task: n,
            seed: 4,
            image_size: 16,
            icl_pairs: 1,
            config_hash: "test".into(),
        }
    }

    #[test]
    fn seed_ranges_are_disjoint() {
        for i in 0..1000 {
            assert!(train_seed(i, i * 7, i * 13) < TEST_SEED_BASE);
            assert!(test_seed(i, 3, i) >= TEST_SEED_BASE);
        }
    }

    #[test]
    fn counts_hash_and_round_trip() {
        let cat = TaskCatalog::standard();
        let tasks = ["denoise_gaussian", "deblur_gaussian", "canny", "brighten_gamma", "icl_invert"];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_testset(&cat, &spec(&tasks, 3), a.path()).unwrap();
        let mb = build_testset(&cat, &spec(&tasks, 3), b.path()).unwrap();
        for t in tasks {
            assert_eq!(ma.entries_for(t).count(), 3);
        }
        assert_eq!(ma.hash(), mb.hash());
        let loaded = Manifest::load(&manifest_path(a.path())).unwrap();
        assert_eq!(loaded, ma);
        let e = loaded.entries_for("icl_invert").next().unwrap();
        assert_eq!(e.exemplars.len(), 1);
        let l = e.load(a.path()).unwrap();
        let ppm = read_ppm(&a.path().join(&e.hq_ppm)).unwrap();
        assert!(ppm.max_abs_diff(&l.hq) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn empty_corpus() {
        let d = tempfile::tempdir().unwrap();
        let m = build_testset(&TaskCatalog::standard(), &spec(&["canny"], 0), d.path()).unwrap();
        assert!(m.entries.is_empty());
    }
}
