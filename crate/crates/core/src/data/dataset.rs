use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt_response, CorruptionMode};
use super::probe::probe_labels;
use super::scene::{generate_scene, SceneGraph, SceneSpec, ShapeKind, MAX_OBJECTS};
use super::templates::{caption, render_qa, Domain, TaskTemplate, CAPTION_QUESTION};
use super::vocab::{token, tokenize, BOS, EOS, THINK_CLOSE, THINK_OPEN};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::component_rng;
use crate::objectives::PreferenceSample;

/// Responses at least this long count as shifted.
pub const SHIFT_MIN_TOKENS: usize = 25;
const ATTEMPTS: usize = 1000;
pub const CAPTION_TEMPLATE: &str = "caption";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Stage1Align,
    Stage1Pretrain,
    Stage2Pt,
    Eval,
    Probe,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Stage1Align,
        Split::Stage1Pretrain,
        Split::Stage2Pt,
        Split::Eval,
        Split::Probe,
    ];

    /// Sample ids of split `s` are `s.index() << 32 | i`, so splits never overlap.
    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Stage1Align => "stage1_align",
            Split::Stage1Pretrain => "stage1_pretrain",
            Split::Stage2Pt => "stage2_pt",
            Split::Eval => "eval",
            Split::Probe => "probe",
        }
    }

    pub fn of_id(id: u64) -> Option<Split> {
        Split::ALL.get((id >> 32) as usize).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub stage1_align: usize,
    pub stage1_pretrain: usize,
    pub stage2_pt: usize,
    pub eval: usize,
    pub probe: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Stage1Align => self.stage1_align,
            Split::Stage1Pretrain => self.stage1_pretrain,
            Split::Stage2Pt => self.stage2_pt,
            Split::Eval => self.eval,
            Split::Probe => self.probe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainMix {
    pub general: f64,
    pub vision_centric: f64,
    pub ocr_like: f64,
    pub knowledge_like: f64,
}

impl Default for DomainMix {
    fn default() -> Self {
        Self {
            general: 0.25,
            vision_centric: 0.25,
            ocr_like: 0.25,
            knowledge_like: 0.25,
        }
    }
}

impl DomainMix {
    pub fn weights(&self) -> [f64; 4] {
        [
            self.general,
            self.vision_centric,
            self.ocr_like,
            self.knowledge_like,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: SplitCounts,
    /// Fraction of post-training samples with long, `<think>`-wrapped responses.
    #[serde(default)]
    pub shift_ratio: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default)]
    pub domain_mix: DomainMix,
    #[serde(default)]
    pub corruption: CorruptionMode,
}

fn default_image_size() -> usize {
    64
}
fn default_patch_size() -> usize {
    8
}
fn default_min_objects() -> usize {
    1
}
fn default_max_objects() -> usize {
    6
}

impl DatasetManifest {
    pub fn new(seed: u64, counts: SplitCounts) -> Self {
        Self {
            seed,
            counts,
            shift_ratio: 0.0,
            image_size: default_image_size(),
            patch_size: default_patch_size(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            domain_mix: DomainMix::default(),
            corruption: CorruptionMode::default(),
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift_ratio) {
            return Err(Error::Config(format!(
                "shift_ratio {} outside [0, 1]",
                self.shift_ratio
            )));
        }
        let w = self.domain_mix.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0))
            || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "domain_mix {w:?} must be non-negative and sum to 1"
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.min_objects == 0 || self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "object range {}..={} must lie within 1..={MAX_OBJECTS}",
                self.min_objects, self.max_objects
            )));
        }
        if Split::ALL
            .iter()
            .any(|&s| self.counts.get(s) > u32::MAX as usize)
        {
            return Err(Error::Config("split sizes must fit in 32 bits".into()));
        }
        self.scene_spec().validate()
    }
}

/// One generated example with everything the pipeline and probes need.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSample {
    pub id: u64,
    pub split: Split,
    pub image: Image,
    pub scene: SceneGraph,
    pub domain: Domain,
    pub template_id: String,
    pub question: String,
    /// The gold answer without any reasoning wrapper.
    pub answer: String,
    pub chosen: String,
    pub rejected: String,
    pub shifted: bool,
    pub focus_cell: Option<(usize, usize)>,
    pub caption: String,
    pub label: Option<u8>,
    pub mask: Vec<u8>,
}

impl DataSample {
    pub fn query_tokens(&self) -> Result<Vec<usize>> {
        let mut t = vec![token(BOS)];
        t.extend(tokenize(&self.question)?);
        Ok(t)
    }

    /// Response words followed by `<eos>`.
    pub fn response_tokens(text: &str) -> Result<Vec<usize>> {
        let mut t = tokenize(text)?;
        t.push(token(EOS));
        Ok(t)
    }

    pub fn to_preference(&self) -> Result<PreferenceSample> {
        Ok(PreferenceSample {
            id: self.id,
            image: self.image.clone(),
            query: self.query_tokens()?,
            chosen: Self::response_tokens(&self.chosen)?,
            rejected: Self::response_tokens(&self.rejected)?,
            template_id: self.template_id.clone(),
            shifted: self.shifted,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<DataSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DataSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Exact per-domain counts by largest remainder, shuffled into sample order.
fn domain_assignment(n: usize, mix: &DomainMix, rng: &mut impl Rng) -> Vec<Domain> {
    let w = mix.weights();
    let ideal: Vec<f64> = w.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        (ideal[b] - ideal[b].floor())
            .total_cmp(&(ideal[a] - ideal[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &d in order.iter().take(missing) {
        counts[d] += 1;
    }
    let mut out: Vec<Domain> = Domain::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&d, &c)| std::iter::repeat_n(d, c))
        .collect();
    out.shuffle(rng);
    out
}

fn shifted_flags(n: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let k = (ratio * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    flags.shuffle(rng);
    flags
}

const CHAIN_SENTENCES: [&str; 5] = [
    "let me look at each cell of the grid carefully .",
    "first i check every object and its color .",
    "then i compare each object with the question .",
    "i count the objects in the image .",
    "so i see the answer .",
];

/// A `<think> … </think>` reasoning wrapper of 24 to 36 inner words.
pub fn reasoning_chain(rng: &mut impl Rng) -> Vec<String> {
    let target = rng.random_range(24..=36);
    let mut words = vec![THINK_OPEN.to_string()];
    while words.len() - 1 < target {
        let s = CHAIN_SENTENCES.choose(rng).expect("nonempty");
        words.extend(s.split(' ').map(String::from));
    }
    words.push(THINK_CLOSE.to_string());
    words
}

struct Plan {
    id: u64,
    split: Split,
    domain: Domain,
    shifted: bool,
    dominant: Option<ShapeKind>,
}

fn generate_sample(m: &DatasetManifest, plan: &Plan) -> Result<DataSample> {
    let mut rng = component_rng(m.seed, plan.id);
    let mut spec = m.scene_spec();
    spec.dominant = plan.dominant;
    let templates = TaskTemplate::for_domain(plan.domain);
    for _ in 0..ATTEMPTS {
        let (image, scene) = generate_scene(rng.random(), &spec)?;
        let labels = probe_labels(&scene, m.patch_size)?;
        let cap = caption(&scene);
        let (template_id, question, answer, chosen, rejected, focus_cell) = if plan.split
            == Split::Stage1Align
        {
            // Alignment pairs describe the image; the rejected caption swaps one color.
            let mut wrong = scene.clone();
            let k = rng.random_range(0..wrong.objects.len().max(1));
            if let Some(o) = wrong.objects.get_mut(k) {
                let others: Vec<_> = super::scene::Color::ALL
                    .into_iter()
                    .filter(|&c| c != o.color)
                    .collect();
                o.color = *others.choose(&mut rng).expect("eight colors");
            }
            (
                CAPTION_TEMPLATE.to_string(),
                CAPTION_QUESTION.to_string(),
                cap.clone(),
                cap.clone(),
                caption(&wrong),
                None,
            )
        } else {
            let template = *templates
                .choose(&mut rng)
                .expect("every domain has templates");
            let qa = match render_qa(&scene, template, rng.random()) {
                Ok(qa) => qa,
                Err(Error::InapplicableTemplate { .. }) => continue,
                Err(e) => return Err(e),
            };
            let wrong = corrupt_response(&qa.answer, m.corruption, &qa.scene_values, rng.random());
            let mut chosen = Vec::new();
            let mut rejected = Vec::new();
            if plan.shifted {
                let chain = reasoning_chain(&mut rng);
                chosen.extend(chain.iter().cloned());
                rejected.extend(chain);
            }
            chosen.push(qa.answer.value.clone());
            rejected.extend(wrong);
            (
                template.id().to_string(),
                qa.question,
                qa.answer.value,
                chosen.join(" "),
                rejected.join(" "),
                qa.focus_cell,
            )
        };
        return Ok(DataSample {
            id: plan.id,
            split: plan.split,
            image,
            scene,
            domain: plan.domain,
            template_id,
            question,
            answer,
            chosen,
            rejected,
            shifted: plan.shifted,
            focus_cell,
            caption: cap,
            label: labels.label,
            mask: labels.mask,
        });
    }
    Err(Error::Config(format!(
        "could not instantiate a {} question for sample {}",
        plan.domain.name(),
        plan.id
    )))
}

fn plans(m: &DatasetManifest, split: Split) -> Vec<Plan> {
    let n = m.counts.get(split);
    let mut rng = component_rng(m.seed, u64::MAX - split.index());
    let domains = domain_assignment(n, &m.domain_mix, &mut rng);
    let ratio = if split == Split::Stage2Pt {
        m.shift_ratio
    } else {
        0.0
    };
    let shifted = shifted_flags(n, ratio, &mut rng);
    (0..n)
        .map(|i| Plan {
            id: split.index() << 32 | i as u64,
            split,
            domain: domains[i],
            shifted: shifted[i],
            dominant: (split == Split::Probe).then(|| ShapeKind::ALL[i % ShapeKind::ALL.len()]),
        })
        .collect()
}

/// Generates one split. Output order is by sample index whatever `workers` is.
pub fn build_split(m: &DatasetManifest, split: Split, workers: usize) -> Result<Vec<DataSample>> {
    m.validate()?;
    let plans = plans(m, split);
    let workers = workers.max(1).min(plans.len().max(1));
    let mut slots: Vec<Option<Result<DataSample>>> = (0..plans.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let plans = &plans;
                scope.spawn(move || {
                    (w..plans.len())
                        .step_by(workers)
                        .map(|i| (i, generate_sample(m, &plans[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("generator thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// The post-training preference split.
pub fn build_preference_dataset(m: &DatasetManifest, workers: usize) -> Result<Vec<DataSample>> {
    build_split(m, Split::Stage2Pt, workers)
}

pub fn build_dataset(m: &DatasetManifest, workers: usize) -> Result<Dataset> {
    let mut samples = Vec::new();
    for split in Split::ALL {
        samples.extend(build_split(m, split, workers)?);
    }
    Ok(Dataset {
        manifest: m.clone(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    image: String,
    q: String,
    y_c: String,
    y_r: String,
    domain: Domain,
    shifted: bool,
    template_id: String,
    split: Split,
    answer: String,
    focus_cell: Option<(usize, usize)>,
    caption: String,
    label: Option<u8>,
    scene: SceneGraph,
}

/// Writes `manifest.json`, `samples.jsonl`, `images/{id}.ppm` and `probe/{id}.mask`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("probe"))?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&ds.manifest)?,
    )?;
    let mut index = BufWriter::new(fs::File::create(dir.join("samples.jsonl"))?);
    for s in &ds.samples {
        let image = format!("images/{}.ppm", s.id);
        fs::write(dir.join(&image), s.image.to_ppm())?;
        fs::write(dir.join(format!("probe/{}.mask", s.id)), &s.mask)?;
        let rec = SampleRecord {
            id: s.id,
            image,
            q: s.question.clone(),
            y_c: s.chosen.clone(),
            y_r: s.rejected.clone(),
            domain: s.domain,
            shifted: s.shifted,
            template_id: s.template_id.clone(),
            split: s.split,
            answer: s.answer.clone(),
            focus_cell: s.focus_cell,
            caption: s.caption.clone(),
            label: s.label,
            scene: s.scene.clone(),
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    manifest.validate()?;
    let grid = manifest.image_size / manifest.patch_size;
    let mut samples = Vec::new();
    for line in BufReader::new(fs::File::open(dir.join("samples.jsonl"))?).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(&line)?;
        let image = Image::from_ppm(&fs::read(dir.join(&r.image))?)?;
        let mask = fs::read(dir.join(format!("probe/{}.mask", r.id)))?;
        if mask.len() != grid * grid {
            return Err(Error::Integrity(format!(
                "mask of sample {} has {} bytes",
                r.id,
                mask.len()
            )));
        }
        samples.push(DataSample {
            id: r.id,
            split: r.split,
            image,
            scene: r.scene,
            domain: r.domain,
            template_id: r.template_id,
            question: r.q,
            answer: r.answer,
            chosen: r.y_c,
            rejected: r.y_r,
            shifted: r.shifted,
            focus_cell: r.focus_cell,
            caption: r.caption,
            label: r.label,
            mask,
        });
    }
    Ok(Dataset { manifest, samples })
}
