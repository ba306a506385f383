//! Procedural scenes and query generation: colored shapes on a dark
//! background, with exact analytic masks and a small attribute ontology that
//! grounds reasoning-style queries in machine-checkable facts.

use crate::datamodel::{
    BinaryMask, DatasetSplit, Image, Phrasing, Sample, SampleKind, SplitName,
};
use crate::error::{Result, SegError};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorKind {
    pub const ALL: [ColorKind; 4] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
        }
    }

    /// Palette on the u8 grid so PNG round-trips are exact.
    fn rgb(self) -> [f64; 3] {
        let u = |v: u8| v as f64 / 255.0;
        match self {
            ColorKind::Red => [u(204), u(26), u(26)],
            ColorKind::Green => [u(26), u(178), u(26)],
            ColorKind::Blue => [u(26), u(102), u(229)],
            ColorKind::Yellow => [u(229), u(204), u(26)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeKind {
    Small,
    Large,
}

impl SizeKind {
    pub fn word(self) -> &'static str {
        match self {
            SizeKind::Small => "small",
            SizeKind::Large => "large",
        }
    }
}

const BACKGROUND: f64 = 26.0 / 255.0;

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub size: SizeKind,
    /// Center in pixel coordinates (x, y).
    pub center: (f64, f64),
    /// Half-extent in pixels (circle radius / half side / triangle half-height).
    pub radius: f64,
}

impl SceneObject {
    /// Exact point-in-shape test at a continuous image point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center;
        let r = self.radius;
        match self.shape {
            ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            ShapeKind::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
            ShapeKind::Triangle => {
                // Upward triangle with vertices (cx, cy-r), (cx-r, cy+r), (cx+r, cy+r).
                let (ax, ay) = (cx, cy - r);
                let (bx, by) = (cx - r, cy + r);
                let (px, py) = (cx + r, cy + r);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2);
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, px, py);
                let d3 = sign(px, py, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    /// Analytic binary mask, sampling each pixel at its center.
    pub fn mask(&self, h: usize, w: usize) -> BinaryMask {
        let bits = Array2::from_shape_fn((h, w), |(y, x)| {
            u8::from(self.contains(x as f64 + 0.5, y as f64 + 0.5))
        });
        BinaryMask { bits }
    }

    pub fn pixel_area(&self, h: usize, w: usize) -> usize {
        self.mask(h, w).pixel_count()
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub height: usize,
    pub width: usize,
}

impl Scene {
    pub fn render(&self) -> Image {
        let mut pixels = Array3::from_elem((self.height, self.width, 3), BACKGROUND);
        for obj in &self.objects {
            let rgb = obj.color.rgb();
            for y in 0..self.height {
                for x in 0..self.width {
                    if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        for c in 0..3 {
                            pixels[[y, x, c]] = rgb[c];
                        }
                    }
                }
            }
        }
        Image::new(pixels).expect("palette is in range")
    }

    pub fn object_mask(&self, idx: usize) -> BinaryMask {
        self.objects[idx].mask(self.height, self.width)
    }

    fn union_mask(&self, indices: &[usize]) -> BinaryMask {
        let mut acc = BinaryMask::zeros(self.height, self.width);
        for &i in indices {
            acc = acc.union_with(&self.object_mask(i));
        }
        acc
    }
}

/// Deterministic scene generation: objects fully inside bounds and pairwise
/// non-overlapping (bounding-circle separation).
pub fn generate_scene(seed: u64, n_objects: usize, image_size: (usize, usize)) -> Result<Scene> {
    assert!(n_objects >= 1, "need at least one object");
    let (h, w) = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::new();
    let margin = 1.0;
    let max_tries = 200;
    for _ in 0..n_objects {
        let mut placed = false;
        for _ in 0..max_tries {
            let shape = *ShapeKind::ALL.choose(&mut rng).unwrap();
            let color = *ColorKind::ALL.choose(&mut rng).unwrap();
            let size = if rng.gen_bool(0.5) {
                SizeKind::Small
            } else {
                SizeKind::Large
            };
            // Radius jitter keeps pixel areas distinct in most scenes.
            let radius = match size {
                SizeKind::Small => rng.gen_range(4..=6) as f64,
                SizeKind::Large => rng.gen_range(9..=12) as f64,
            };
            // Triangles circumscribe their half-extent; bounding radius covers all shapes.
            let bound = radius * std::f64::consts::SQRT_2;
            if 2.0 * (bound + margin) >= w.min(h) as f64 {
                continue;
            }
            let cx = rng.gen_range((bound + margin)..(w as f64 - bound - margin));
            let cy = rng.gen_range((bound + margin)..(h as f64 - bound - margin));
            let candidate = SceneObject {
                shape,
                color,
                size,
                center: (cx, cy),
                radius,
            };
            let cand_bound = bound;
            let clear = objects.iter().all(|o| {
                let ob = o.radius * std::f64::consts::SQRT_2;
                let dx = o.center.0 - cx;
                let dy = o.center.1 - cy;
                (dx * dx + dy * dy).sqrt() > ob + cand_bound + margin
            });
            if clear {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SegError::Data(format!(
                "object placement failed after {max_tries} tries (seed {seed})"
            )));
        }
    }
    Ok(Scene {
        objects,
        height: h,
        width: w,
    })
}

// ---------------------------------------------------------------------------
// Attribute ontology
// ---------------------------------------------------------------------------

/// Fixed world-knowledge facts with machine-checkable ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fact {
    CanRoll,
    GrassColored,
    SkyColored,
    Stackable,
    Largest,
    Smallest,
    Leftmost,
    Rightmost,
}

impl Fact {
    pub const ALL: [Fact; 8] = [
        Fact::CanRoll,
        Fact::GrassColored,
        Fact::SkyColored,
        Fact::Stackable,
        Fact::Largest,
        Fact::Smallest,
        Fact::Leftmost,
        Fact::Rightmost,
    ];

    /// Indices of objects the fact selects. Superlatives require a unique
    /// extremum and otherwise select nothing.
    pub fn select(self, scene: &Scene) -> Vec<usize> {
        let n = scene.objects.len();
        match self {
            Fact::CanRoll => (0..n)
                .filter(|&i| scene.objects[i].shape == ShapeKind::Circle)
                .collect(),
            Fact::GrassColored => (0..n)
                .filter(|&i| scene.objects[i].color == ColorKind::Green)
                .collect(),
            Fact::SkyColored => (0..n)
                .filter(|&i| scene.objects[i].color == ColorKind::Blue)
                .collect(),
            Fact::Stackable => (0..n)
                .filter(|&i| scene.objects[i].shape == ShapeKind::Square)
                .collect(),
            Fact::Largest | Fact::Smallest => {
                let areas: Vec<usize> = (0..n)
                    .map(|i| scene.objects[i].pixel_area(scene.height, scene.width))
                    .collect();
                let best = if self == Fact::Largest {
                    areas.iter().max()
                } else {
                    areas.iter().min()
                };
                let Some(&best) = best else { return vec![] };
                let hits: Vec<usize> = (0..n).filter(|&i| areas[i] == best).collect();
                if hits.len() == 1 {
                    hits
                } else {
                    vec![]
                }
            }
            Fact::Leftmost | Fact::Rightmost => {
                let key = |i: usize| scene.objects[i].center.0;
                let best = (0..n).fold(None::<usize>, |acc, i| match acc {
                    None => Some(i),
                    Some(j) => {
                        let better = if self == Fact::Leftmost {
                            key(i) < key(j)
                        } else {
                            key(i) > key(j)
                        };
                        Some(if better { i } else { j })
                    }
                });
                best.into_iter().collect()
            }
        }
    }

    pub fn short_phrase(self) -> &'static str {
        match self {
            Fact::CanRoll => "the object that can roll",
            Fact::GrassColored => "the object with the same color as grass",
            Fact::SkyColored => "the object with the same color as the sky",
            Fact::Stackable => "the object that stacks neatly",
            Fact::Largest => "the largest object",
            Fact::Smallest => "the smallest object",
            Fact::Leftmost => "the leftmost object",
            Fact::Rightmost => "the rightmost object",
        }
    }

    pub fn long_sentence(self) -> &'static str {
        match self {
            Fact::CanRoll => {
                "If I pushed each object gently on a slope , which one would keep moving on its own ? Please segment it ."
            }
            Fact::GrassColored => {
                "One of these objects shares its color with a healthy summer lawn . Please segment that object ."
            }
            Fact::SkyColored => {
                "Which object has the color you would see looking up on a clear day ? Please segment it ."
            }
            Fact::Stackable => {
                "If you wanted to build a stable tower , which object would be the easiest to stack ? Please segment it ."
            }
            Fact::Largest => {
                "Among all the objects in this picture , please segment the one that covers the most area ."
            }
            Fact::Smallest => {
                "Among all the objects in this picture , please segment the one that covers the least area ."
            }
            Fact::Leftmost => "Please segment the object closest to the left edge of the image .",
            Fact::Rightmost => "Please segment the object closest to the right edge of the image .",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    Explicit,
    AttributeReasoning,
    KnowledgeReasoning,
}

/// A query over a scene: how it is phrased and which objects it targets.
#[derive(Clone, Debug)]
pub struct QuerySpec {
    pub kind: QueryKind,
    pub phrasing: Phrasing,
    pub predicate: Predicate,
}

#[derive(Clone, Debug)]
pub enum Predicate {
    /// Shape or color class word; selects every matching object.
    ClassName(String),
    /// Full (size, color, shape) description; must select exactly one object.
    Explicit(SizeKind, ColorKind, ShapeKind),
    /// Ontology fact.
    Attribute(Fact),
}

impl Predicate {
    pub fn select(&self, scene: &Scene) -> Vec<usize> {
        match self {
            Predicate::ClassName(name) => (0..scene.objects.len())
                .filter(|&i| {
                    scene.objects[i].shape.word() == name || scene.objects[i].color.word() == name
                })
                .collect(),
            Predicate::Explicit(size, color, shape) => (0..scene.objects.len())
                .filter(|&i| {
                    let o = &scene.objects[i];
                    o.size == *size && o.color == *color && o.shape == *shape
                })
                .collect(),
            Predicate::Attribute(fact) => fact.select(scene),
        }
    }
}

// ---------------------------------------------------------------------------
// Sample construction
// ---------------------------------------------------------------------------

pub const SEMANTIC_TEMPLATES: usize = 3;

fn semantic_instruction(class_name: &str, template_id: usize) -> String {
    match template_id % SEMANTIC_TEMPLATES {
        0 => format!("Can you segment the {class_name} in this image ?"),
        1 => format!("Please segment the {class_name} ."),
        _ => format!("What is the {class_name} in this picture ? Please respond with a mask ."),
    }
}

/// Semantic-segmentation style sample: class word, union mask over matches.
pub fn make_semantic_sample(
    scene: &Scene,
    class_name: &str,
    template_id: usize,
    id: String,
) -> Result<Sample> {
    let pred = Predicate::ClassName(class_name.to_string());
    let hits = pred.select(scene);
    if hits.is_empty() {
        return Err(SegError::Data(format!("class {class_name} absent from scene")));
    }
    Ok(Sample {
        id,
        image: scene.render(),
        instruction: semantic_instruction(class_name, template_id),
        answer_text: "It is <SEG> .".to_string(),
        target_masks: vec![scene.union_mask(&hits)],
        kind: SampleKind::Semantic,
        phrasing: Phrasing::ShortPhrase,
    })
}

/// Referring-segmentation style sample from an explicit unambiguous description.
pub fn make_referring_sample(scene: &Scene, query: &QuerySpec, id: String) -> Result<Sample> {
    let Predicate::Explicit(size, color, shape) = &query.predicate else {
        return Err(SegError::Data("referring sample needs an explicit predicate".into()));
    };
    let hits = query.predicate.select(scene);
    match hits.len() {
        0 => Err(SegError::Data("description matches no object".into())),
        1 => Ok(Sample {
            id,
            image: scene.render(),
            instruction: format!(
                "Can you segment the {} {} {} in this image ?",
                size.word(),
                color.word(),
                shape.word()
            ),
            answer_text: "Sure , it is <SEG> .".to_string(),
            target_masks: vec![scene.object_mask(hits[0])],
            kind: SampleKind::Referring,
            phrasing: Phrasing::ShortPhrase,
        }),
        n => Err(SegError::Data(format!("ambiguous description ({n} matches)"))),
    }
}

/// Reasoning sample: implicit query from the attribute ontology; one `<SEG>`
/// (and one mask) per selected object.
pub fn make_reasoning_sample(scene: &Scene, query: &QuerySpec, id: String) -> Result<Sample> {
    let Predicate::Attribute(fact) = &query.predicate else {
        return Err(SegError::Data("reasoning sample needs an attribute predicate".into()));
    };
    let hits = query.predicate.select(scene);
    if hits.is_empty() {
        return Err(SegError::Data(format!("predicate {fact:?} selects no object")));
    }
    let instruction = match query.phrasing {
        Phrasing::ShortPhrase => format!("Can you segment {} ?", fact.short_phrase()),
        Phrasing::LongSentence => fact.long_sentence().to_string(),
    };
    let answer_text = match hits.len() {
        1 => "Sure , it is <SEG> .".to_string(),
        n => {
            let segs = vec!["<SEG>"; n].join(" and ");
            format!("Sure , they are {segs} .")
        }
    };
    Ok(Sample {
        id,
        image: scene.render(),
        instruction,
        answer_text,
        target_masks: hits.iter().map(|&i| scene.object_mask(i)).collect(),
        kind: SampleKind::Reasoning,
        phrasing: query.phrasing,
    })
}

/// VQA sample: count or color question, text-only answer, no masks.
pub fn make_vqa_sample(scene: &Scene, variant: usize, id: String) -> Sample {
    // Color questions need a uniquely-shaped object; fall back to counting.
    let unique_shape = ShapeKind::ALL.iter().find(|&&s| {
        scene.objects.iter().filter(|o| o.shape == s).count() == 1
    });
    let (instruction, answer_text) = match (variant % 2, unique_shape) {
        (1, Some(&shape)) => {
            let obj = scene.objects.iter().find(|o| o.shape == shape).unwrap();
            (
                format!("What color is the {} ?", shape.word()),
                format!("It is {} .", obj.color.word()),
            )
        }
        _ => (
            "How many objects are there in this image ?".to_string(),
            format!("There are {} .", scene.objects.len()),
        ),
    };
    Sample {
        id,
        image: scene.render(),
        instruction,
        answer_text,
        target_masks: vec![],
        kind: SampleKind::Vqa,
        phrasing: Phrasing::ShortPhrase,
    }
}

// ---------------------------------------------------------------------------
// Corpus builder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub seed: u64,
    pub image_size: (usize, usize),
    /// Pool sizes for the reasoning-free kinds, split across train/val/test
    /// by `split_fractions`.
    pub n_semantic: usize,
    pub n_referring: usize,
    pub n_vqa: usize,
    /// Reasoning samples per split. Zero-shot pretraining keeps the train
    /// count at 0; fine-tuning corpora set it > 0.
    pub n_reasoning_train: usize,
    pub n_reasoning_val: usize,
    pub n_reasoning_test: usize,
    pub split_fractions: (f64, f64, f64),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            image_size: (64, 64),
            n_semantic: 100,
            n_referring: 100,
            n_vqa: 50,
            n_reasoning_train: 0,
            n_reasoning_val: 24,
            n_reasoning_test: 24,
            split_fractions: (0.8, 0.1, 0.1),
        }
    }
}

/// Corpus of three disjoint splits. Every sample gets its own scene, so the
/// splits are disjoint by scene construction.
pub struct Corpus {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let (ft, fv, fs) = spec.split_fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(SegError::Config(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut scene_seed = spec.seed.wrapping_mul(1_000_003);
    let mut next_scene = |rng: &mut ChaCha8Rng, n_min: usize, n_max: usize| -> Result<Scene> {
        // A fresh seed per scene keeps generation deterministic and lets
        // placement failures name the exact seed.
        loop {
            scene_seed = scene_seed.wrapping_add(1);
            let n = rng.gen_range(n_min..=n_max);
            match generate_scene(scene_seed, n, spec.image_size) {
                Ok(s) => return Ok(s),
                Err(_) => continue,
            }
        }
    };

    let mut semantic = Vec::new();
    for i in 0..spec.n_semantic {
        loop {
            let scene = next_scene(&mut rng, 1, 3)?;
            // Choose a class present in the scene: shape or color word.
            let mut classes: Vec<String> = Vec::new();
            for o in &scene.objects {
                classes.push(o.shape.word().to_string());
                classes.push(o.color.word().to_string());
            }
            classes.dedup();
            let class = classes.choose(&mut rng).unwrap().clone();
            let template = rng.gen_range(0..SEMANTIC_TEMPLATES);
            if let Ok(s) = make_semantic_sample(&scene, &class, template, format!("sem-{i:05}")) {
                semantic.push(s);
                break;
            }
        }
    }

    let mut referring = Vec::new();
    for i in 0..spec.n_referring {
        loop {
            let scene = next_scene(&mut rng, 2, 3)?;
            let idx = rng.gen_range(0..scene.objects.len());
            let o = &scene.objects[idx];
            let query = QuerySpec {
                kind: QueryKind::Explicit,
                phrasing: Phrasing::ShortPhrase,
                predicate: Predicate::Explicit(o.size, o.color, o.shape),
            };
            if let Ok(s) = make_referring_sample(&scene, &query, format!("ref-{i:05}")) {
                referring.push(s);
                break;
            }
        }
    }

    let mut vqa = Vec::new();
    for i in 0..spec.n_vqa {
        let scene = next_scene(&mut rng, 1, 3)?;
        let variant = rng.gen_range(0..2);
        vqa.push(make_vqa_sample(&scene, variant, format!("vqa-{i:05}")));
    }

    let mut make_reasoning = |rng: &mut ChaCha8Rng, count: usize, tag: &str| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        let mut scene_seed_local = 0usize;
        while out.len() < count {
            scene_seed_local += 1;
            if scene_seed_local > count * 1000 {
                return Err(SegError::Data("reasoning sample generation stalled".into()));
            }
            let scene = next_scene(rng, 2, 3)?;
            let fact = *Fact::ALL.choose(rng).unwrap();
            let phrasing = if rng.gen_bool(0.5) {
                Phrasing::ShortPhrase
            } else {
                Phrasing::LongSentence
            };
            let query = QuerySpec {
                kind: QueryKind::KnowledgeReasoning,
                phrasing,
                predicate: Predicate::Attribute(fact),
            };
            let id = format!("rsn-{tag}-{:05}", out.len());
            if let Ok(s) = make_reasoning_sample(&scene, &query, id) {
                out.push(s);
            }
        }
        Ok(out)
    };

    let rsn_train = make_reasoning(&mut rng, spec.n_reasoning_train, "train")?;
    let rsn_val = make_reasoning(&mut rng, spec.n_reasoning_val, "val")?;
    let rsn_test = make_reasoning(&mut rng, spec.n_reasoning_test, "test")?;

    let cut = |pool: Vec<Sample>| -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
        let n = pool.len();
        let n_train = (n as f64 * ft).round() as usize;
        let n_val = (n as f64 * fv).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        let mut it = pool.into_iter();
        let train: Vec<Sample> = it.by_ref().take(n_train).collect();
        let val: Vec<Sample> = it.by_ref().take(n_val).collect();
        let test: Vec<Sample> = it.collect();
        (train, val, test)
    };

    let (sem_tr, sem_va, sem_te) = cut(semantic);
    let (ref_tr, ref_va, ref_te) = cut(referring);
    let (vqa_tr, vqa_va, vqa_te) = cut(vqa);

    let assemble = |name: SplitName, parts: Vec<Vec<Sample>>| -> Result<DatasetSplit> {
        let split = DatasetSplit {
            name,
            samples: parts.into_iter().flatten().collect(),
        };
        split.validate()?;
        Ok(split)
    };

    Ok(Corpus {
        train: assemble(SplitName::Train, vec![sem_tr, ref_tr, vqa_tr, rsn_train])?,
        val: assemble(SplitName::Val, vec![sem_va, ref_va, vqa_va, rsn_val])?,
        test: assemble(SplitName::Test, vec![sem_te, ref_te, vqa_te, rsn_test])?,
    })
}

/// Closed lexicon covering every template, class word and answer the
/// generator can emit. The vocabulary is built from this list.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<&str> = vec![
        // template words
        "can", "you", "segment", "the", "in", "this", "image", "please", "what", "is", "picture",
        "respond", "with", "a", "mask", "it", "sure", "they", "are", "and", "there", "how", "many",
        "objects", "object", "that", "roll", "if", "i", "pushed", "each", "gently", "on", "slope",
        "which", "one", "would", "keep", "moving", "its", "own", "color", "same", "as", "grass", "of",
        "these", "shares", "healthy", "summer", "lawn", "sky", "has", "see", "looking", "up",
        "clear", "day", "stacks", "neatly", "wanted", "to", "build", "stable", "tower", "be",
        "easiest", "stack", "largest", "smallest", "among", "all", "covers", "most", "least",
        "area", "leftmost", "rightmost", "closest", "left", "right", "edge", "your",
        // classes and attributes
        "circle", "square", "triangle", "red", "green", "blue", "yellow", "small", "large",
        // counts
        "1", "2", "3", "4", "5",
        // punctuation
        ".", ",", "?", "!", ":",
    ];
    words.dedup();
    words.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{self, Vocabulary};
    use crate::datamodel::SEG_TOKEN;

    #[test]
    fn scene_generation_is_deterministic_and_disjoint() {
        let a = generate_scene(0, 3, (64, 64)).unwrap();
        let b = generate_scene(0, 3, (64, 64)).unwrap();
        assert_eq!(a.render(), b.render());
        // Pairwise disjoint masks: pixelwise AND of any pair is all-zero.
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!(a.object_mask(i).disjoint_from(&a.object_mask(j)), "{i} vs {j}");
            }
        }
        let single = generate_scene(0, 1, (64, 64)).unwrap();
        assert!(single.object_mask(0).pixel_count() > 0);
    }

    #[test]
    fn analytic_masks_match_rendered_pixels() {
        // Brute-force oracle: a pixel belongs to an object's mask iff the
        // rendered image shows that object's color there (objects are
        // disjoint and colors differ from background).
        let scene = generate_scene(7, 3, (64, 64)).unwrap();
        let img = scene.render();
        for (i, obj) in scene.objects.iter().enumerate() {
            let mask = scene.object_mask(i);
            let rgb = obj.color.rgb();
            for y in 0..64 {
                for x in 0..64 {
                    let on = mask.bits[[y, x]] == 1;
                    let painted = (0..3).all(|c| (img.pixels[[y, x, c]] - rgb[c]).abs() < 1e-9);
                    if on {
                        assert!(painted, "obj {i} pixel ({x},{y}) masked but not painted");
                    } else if painted {
                        // Same color may legitimately appear on another object.
                        let other = scene.objects.iter().enumerate().any(|(j, o)| {
                            j != i && o.color == obj.color && scene.object_mask(j).bits[[y, x]] == 1
                        });
                        assert!(other, "obj {i} pixel ({x},{y}) painted but not masked");
                    }
                }
            }
        }
    }

    #[test]
    fn semantic_sample_unions_matching_objects() {
        // Build a scene with two red objects by construction.
        let mut scene = generate_scene(3, 2, (64, 64)).unwrap();
        scene.objects[0].color = ColorKind::Red;
        scene.objects[1].color = ColorKind::Red;
        let s = make_semantic_sample(&scene, "red", 0, "t".into()).unwrap();
        let a0 = scene.object_mask(0).pixel_count();
        let a1 = scene.object_mask(1).pixel_count();
        assert_eq!(s.target_masks[0].pixel_count(), a0 + a1);
        assert!(s.instruction.contains("segment the red"));
        assert!(make_semantic_sample(&scene, "dragon", 0, "t2".into()).is_err());
    }

    #[test]
    fn template_diversity_same_target() {
        let scene = generate_scene(11, 2, (64, 64)).unwrap();
        let class = scene.objects[0].shape.word();
        let m0 = make_semantic_sample(&scene, class, 0, "a".into()).unwrap();
        let m1 = make_semantic_sample(&scene, class, 1, "b".into()).unwrap();
        let m2 = make_semantic_sample(&scene, class, 2, "c".into()).unwrap();
        assert_ne!(m0.instruction, m1.instruction);
        assert_ne!(m1.instruction, m2.instruction);
        assert_ne!(m0.instruction, m2.instruction);
        assert_eq!(m0.target_masks, m1.target_masks);
        assert_eq!(m1.target_masks, m2.target_masks);
    }

    #[test]
    fn referring_rejects_ambiguity_and_selects_uniquely() {
        let mut scene = generate_scene(5, 2, (64, 64)).unwrap();
        scene.objects[0] = SceneObject {
            shape: ShapeKind::Square,
            color: ColorKind::Blue,
            size: SizeKind::Small,
            ..scene.objects[0].clone()
        };
        scene.objects[1] = SceneObject {
            shape: ShapeKind::Circle,
            color: ColorKind::Red,
            size: SizeKind::Large,
            ..scene.objects[1].clone()
        };
        let q = QuerySpec {
            kind: QueryKind::Explicit,
            phrasing: Phrasing::ShortPhrase,
            predicate: Predicate::Explicit(SizeKind::Small, ColorKind::Blue, ShapeKind::Square),
        };
        let s = make_referring_sample(&scene, &q, "r".into()).unwrap();
        assert_eq!(s.target_masks.len(), 1);
        assert_eq!(s.target_masks[0], scene.object_mask(0));
        // Description generated then parsed back selects the same object.
        assert_eq!(q.predicate.select(&scene), vec![0]);

        // Duplicate the first object's appearance: ambiguous.
        scene.objects[1] = SceneObject {
            shape: ShapeKind::Square,
            color: ColorKind::Blue,
            size: SizeKind::Small,
            ..scene.objects[1].clone()
        };
        assert!(make_referring_sample(&scene, &q, "r2".into()).is_err());
    }

    #[test]
    fn reasoning_ontology_rules() {
        let mut scene = generate_scene(9, 3, (64, 64)).unwrap();
        scene.objects[0].shape = ShapeKind::Circle;
        scene.objects[1].shape = ShapeKind::Square;
        scene.objects[2].shape = ShapeKind::Triangle;
        scene.objects[1].color = ColorKind::Green;
        scene.objects[0].color = ColorKind::Red;
        scene.objects[2].color = ColorKind::Yellow;
        let roll = QuerySpec {
            kind: QueryKind::KnowledgeReasoning,
            phrasing: Phrasing::ShortPhrase,
            predicate: Predicate::Attribute(Fact::CanRoll),
        };
        let s = make_reasoning_sample(&scene, &roll, "q".into()).unwrap();
        assert_eq!(s.target_masks, vec![scene.object_mask(0)]);

        let grass = QuerySpec {
            predicate: Predicate::Attribute(Fact::GrassColored),
            ..roll.clone()
        };
        let s = make_reasoning_sample(&scene, &grass, "g".into()).unwrap();
        assert_eq!(s.target_masks, vec![scene.object_mask(1)]);

        // Largest selects the unique max-area object.
        let areas: Vec<usize> = (0..3).map(|i| scene.objects[i].pixel_area(64, 64)).collect();
        let expect = areas
            .iter()
            .enumerate()
            .max_by_key(|(_, &a)| a)
            .map(|(i, _)| i)
            .unwrap();
        if areas.iter().filter(|&&a| a == areas[expect]).count() == 1 {
            let largest = QuerySpec {
                predicate: Predicate::Attribute(Fact::Largest),
                ..roll.clone()
            };
            let s = make_reasoning_sample(&scene, &largest, "l".into()).unwrap();
            assert_eq!(s.target_masks, vec![scene.object_mask(expect)]);
        }
    }

    #[test]
    fn vqa_sample_has_no_masks_or_seg() {
        let scene = generate_scene(13, 3, (64, 64)).unwrap();
        for variant in 0..2 {
            let s = make_vqa_sample(&scene, variant, format!("v{variant}"));
            assert!(s.target_masks.is_empty());
            assert!(!s.answer_text.contains(SEG_TOKEN));
            s.validate().unwrap();
        }
        let count = make_vqa_sample(&scene, 0, "c".into());
        assert!(count.answer_text.contains('3'));
    }

    #[test]
    fn corpus_is_deterministic_and_valid_with_known_lexicon() {
        let spec = CorpusSpec {
            n_semantic: 12,
            n_referring: 12,
            n_vqa: 6,
            n_reasoning_val: 6,
            n_reasoning_test: 6,
            ..CorpusSpec::default()
        };
        let a = build_corpus(&spec).unwrap();
        let b = build_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        // Zero-shot protocol: no reasoning samples in train.
        assert!(a.train.samples.iter().all(|s| s.kind != SampleKind::Reasoning));
        assert!(a.val.samples.iter().any(|s| s.kind == SampleKind::Reasoning));

        // Every generated word is in the lexicon (no UNK after encoding).
        let vocab = Vocabulary::build(&lexicon()).unwrap().expand(SEG_TOKEN).unwrap();
        for split in [&a.train, &a.val, &a.test] {
            split.validate().unwrap();
            for s in &split.samples {
                let text = tokenizer::conversation_text(&s.instruction, &s.answer_text);
                let ts = tokenizer::encode(&text, &vocab);
                assert!(
                    !ts.ids.contains(&vocab.unk_id()),
                    "UNK in sample {}: {text}",
                    s.id
                );
            }
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let spec = CorpusSpec {
            split_fractions: (0.5, 0.2, 0.2),
            ..CorpusSpec::default()
        };
        assert!(build_corpus(&spec).is_err());
    }
}
