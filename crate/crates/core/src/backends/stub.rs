//! Deterministic synthetic environment.
//!
//! Each registered image carries a hidden vector of small integer
//! attributes. The vision stub describes them, corrupting each one
//! independently with probability `1 - caption_fidelity`; the reasoning stub
//! reads the description back, applies the task's answer function and, with
//! probability `1 - reasoner_skill`, slips by one.
//!
//! Decoy values are drawn from [`DECOY_RANGE`], which is disjoint from the
//! hidden value range, so any corruption moves a sum or a max. With a
//! perfect reasoner the expected caption reward under the sum task is
//! therefore exactly `caption_fidelity ^ attributes`.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::sync::{Arc, LazyLock};
use std::time::Instant;

use rand::Rng;
use regex::Regex;

use super::{Backend, BackendError, GenRequest, GenResponse};
use crate::config::GoldFn;
use crate::rng;

/// Range of hidden attribute values.
pub const VALUE_RANGE: RangeInclusive<u32> = 0..=9;
/// Range decoy values are drawn from.
pub const DECOY_RANGE: RangeInclusive<u32> = 10..=19;
/// Probability that a reasoning rollout wraps its work in `<think>` tags.
pub const THINK_STYLE_PROB: f64 = 0.75;
/// Upper bound on re-check lines per rollout.
pub const MAX_LOOK_BACKS: u32 = 3;
pub const LOOK_BACK_LINE: &str = "Let me look back at the image to confirm each value.";

pub const DESCRIPTION_OPEN: &str = "<image_description>";
pub const DESCRIPTION_CLOSE: &str = "</image_description>";

static READING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\ba([0-9]+)=([0-9]+)\b").unwrap());

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_attributes: usize,
    pub caption_fidelity: f64,
    pub reasoner_skill: f64,
    pub gold_fn: GoldFn,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_attributes: 4,
            caption_fidelity: 1.0,
            reasoner_skill: 1.0,
            gold_fn: GoldFn::Sum,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: WorldConfig,
    attributes: BTreeMap<String, Vec<u32>>,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Self {
        Self {
            config,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_images<I, S>(config: WorldConfig, image_refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut world = Self::new(config);
        for image_ref in image_refs {
            world.register(image_ref.as_ref());
        }
        world
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    /// Registers an image, deriving its attributes from `(seed, image_ref)`.
    pub fn register(&mut self, image_ref: &str) -> &[u32] {
        let seed = self.config.seed;
        let m = self.config.num_attributes;
        self.attributes.entry(image_ref.to_string()).or_insert_with(|| {
            let mut rng = rng::stream(seed, &["attributes", image_ref]);
            (0..m).map(|_| rng.random_range(VALUE_RANGE)).collect()
        })
    }

    /// Registers an image with explicit attributes.
    pub fn insert(&mut self, image_ref: &str, attributes: Vec<u32>) {
        assert_eq!(attributes.len(), self.config.num_attributes);
        self.attributes.insert(image_ref.to_string(), attributes);
    }

    pub fn attributes(&self, image_ref: &str) -> Option<&[u32]> {
        self.attributes.get(image_ref).map(Vec::as_slice)
    }

    pub fn image_refs(&self) -> impl Iterator<Item = &str> {
        self.attributes.keys().map(String::as_str)
    }

    /// The configured answer function applied to `values`.
    pub fn answer_of(&self, values: &[u32]) -> u32 {
        match self.config.gold_fn {
            GoldFn::Sum => values.iter().sum(),
            GoldFn::Max => values.iter().copied().max().unwrap_or(0),
            GoldFn::Count => values.iter().filter(|&&v| v != 0).count() as u32,
        }
    }

    pub fn gold_answer(&self, image_ref: &str) -> Option<u32> {
        self.attributes(image_ref).map(|v| self.answer_of(v))
    }

    pub fn query(&self) -> &'static str {
        match self.config.gold_fn {
            GoldFn::Sum => "What is the sum of all attribute values shown in the image?",
            GoldFn::Max => "What is the largest attribute value shown in the image?",
            GoldFn::Count => "How many attributes shown in the image have a non-zero value?",
        }
    }
}

pub fn render_caption(values: &[u32]) -> String {
    let readings: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| format!("a{}={}", i + 1, v))
        .collect();
    format!(
        "The image shows {} labelled objects. Attribute readings: {}.",
        values.len(),
        readings.join(", ")
    )
}

/// Reads `a1=.., a2=..` back out of a caption. Requires exactly
/// `num_attributes` readings numbered in order.
pub fn parse_caption(text: &str, num_attributes: usize) -> Option<Vec<u32>> {
    let mut values = Vec::with_capacity(num_attributes);
    for (i, cap) in READING.captures_iter(text).enumerate() {
        let index: usize = cap[1].parse().ok()?;
        if index != i + 1 {
            return None;
        }
        values.push(cap[2].parse().ok()?);
    }
    (values.len() == num_attributes).then_some(values)
}

/// Describes an image, corrupting each attribute with probability
/// `1 - caption_fidelity`.
pub fn stub_vision_caption<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    image_ref: &str,
    rng: &mut R,
) -> Result<String, BackendError> {
    let truth = world
        .attributes(image_ref)
        .ok_or_else(|| BackendError::UnknownImage(image_ref.to_string()))?;
    let q = world.config.caption_fidelity;
    let values: Vec<u32> = truth
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < q {
                v
            } else {
                rng.random_range(DECOY_RANGE)
            }
        })
        .collect();
    Ok(render_caption(&values))
}

fn description_in(prompt: &str) -> &str {
    let Some(start) = prompt.rfind(DESCRIPTION_OPEN) else {
        return prompt;
    };
    let body = &prompt[start + DESCRIPTION_OPEN.len()..];
    match body.find(DESCRIPTION_CLOSE) {
        Some(end) => &body[..end],
        None => body,
    }
}

fn join_values(values: &[u32]) -> String {
    match values {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => {
            let init: Vec<String> = init.iter().map(u32::to_string).collect();
            format!("{} and {}", init.join(", "), last)
        }
    }
}

/// Simulated slow-thinking reasoner.
///
/// Reads the description embedded in `prompt`, applies the world's answer
/// function and ends with a boxed answer. An unreadable description yields
/// text without any answer.
pub fn stub_reasoner<R: Rng + ?Sized>(world: &SyntheticWorld, prompt: &str, rng: &mut R) -> String {
    let description = description_in(prompt);
    let slip = rng.random::<f64>() >= world.config.reasoner_skill;
    let slip_up = rng.random::<bool>();
    let think = rng.random::<f64>() < THINK_STYLE_PROB;
    let look_backs = rng.random_range(0..=MAX_LOOK_BACKS);
    let (open, close) = if think { ("<think>\n", "</think>\n") } else { ("", "") };

    let Some(values) = parse_caption(description, world.config.num_attributes) else {
        return format!(
            "{open}The description does not give readable attribute values.\n{close}\
             I cannot determine the requested quantity from this image."
        );
    };

    let correct = world.answer_of(&values);
    let answer = if !slip {
        correct
    } else if slip_up || correct == 0 {
        correct + 1
    } else {
        correct - 1
    };
    let listed = join_values(&values);
    let working = match world.config.gold_fn {
        GoldFn::Sum => {
            let terms: Vec<String> = values.iter().map(u32::to_string).collect();
            format!("Adding them up: {} = {}.", terms.join(" + "), answer)
        }
        GoldFn::Max => format!("The largest of these values is {answer}."),
        GoldFn::Count => format!("Counting the non-zero values gives {answer}."),
    };
    let mut text = String::new();
    text.push_str(open);
    text.push_str(&format!("The description lists the attribute values {listed}.\n"));
    text.push_str(&working);
    text.push('\n');
    for _ in 0..look_backs {
        text.push_str(LOOK_BACK_LINE);
        text.push('\n');
    }
    text.push_str(close);
    text.push_str(&format!(
        "Reading the image gives {answer}.\n\nThe final answer is \\boxed{{{answer}}}."
    ));
    text
}

/// Vision backend over a [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct StubVisionBackend {
    world: Arc<SyntheticWorld>,
}

impl StubVisionBackend {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self { world }
    }
}

impl Backend for StubVisionBackend {
    fn id(&self) -> &str {
        "stub-vision"
    }

    fn generate(&self, request: &GenRequest) -> Result<GenResponse, BackendError> {
        let started = Instant::now();
        let image_ref = request
            .image_ref
            .as_deref()
            .ok_or_else(|| BackendError::InvalidRequest("vision request without an image".into()))?;
        let mut rng = rng::stream(
            request.seed,
            &["vision", &request.system_prompt, &request.user_prompt, image_ref],
        );
        let text = stub_vision_caption(&self.world, image_ref, &mut rng)?;
        Ok(GenResponse {
            text,
            token_count: None,
            backend_id: self.id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Reasoning backend over a [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct StubReasonerBackend {
    world: Arc<SyntheticWorld>,
}

impl StubReasonerBackend {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self { world }
    }
}

impl Backend for StubReasonerBackend {
    fn id(&self) -> &str {
        "stub-reasoner"
    }

    fn generate(&self, request: &GenRequest) -> Result<GenResponse, BackendError> {
        let started = Instant::now();
        let mut rng = rng::stream(
            request.seed,
            &["reasoner", &request.system_prompt, &request.user_prompt],
        );
        let text = stub_reasoner(&self.world, &request.user_prompt, &mut rng);
        Ok(GenResponse {
            text,
            token_count: None,
            backend_id: self.id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
