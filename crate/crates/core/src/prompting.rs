//! The three prompting strategies as staged plans over a captioner and a
//! composer backend.
//!
//! * All-at-Once: one call on the side-by-side composite.
//! * Step-by-Step: caption each image, then compose from the two captions
//!   with a text-only call.
//! * Hybrid: caption each image, then compose from the captions plus the
//!   composite image.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    cached_complete, Backend, BackendError, BackendSpec, ChatRequest, ImagePayload, Message,
    ResponseCache,
};
use crate::dataset::BiTemporalPair;
use crate::imaging::{concat_side_by_side, encode_for_transport, ImagingError, DEFAULT_FILL};
use crate::metrics::word_count;

pub const PLACEHOLDER_BEFORE: &str = "<DESCRIPTION_BEFORE>";
pub const PLACEHOLDER_AFTER: &str = "<DESCRIPTION_AFTER>";

const AAO_MAIN: &str = include_str!("../assets/templates/aao_main.txt");
const SBS_CAPTION: &str = include_str!("../assets/templates/sbs_caption.txt");
const SBS_COMPOSE: &str = include_str!("../assets/templates/sbs_compose.txt");
const HYB_CAPTION: &str = include_str!("../assets/templates/hyb_caption.txt");
const HYB_COMPOSE: &str = include_str!("../assets/templates/hyb_compose.txt");
const CHECKSUMS: &str = include_str!("../assets/templates.sha256");

#[derive(Debug, Error)]
pub enum PromptingError {
    #[error("template {template} needs a binding for {placeholder}")]
    MissingBinding {
        template: TemplateId,
        placeholder: &'static str,
    },
    #[error("attachment mismatch: {0}")]
    AttachmentMismatch(String),
    #[error("stage {index} failed: {source}")]
    Stage {
        index: usize,
        #[source]
        source: BackendError,
    },
    #[error("stage {index} returned an empty response")]
    EmptyResponse { index: usize },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    AaoMain,
    SbsCaption,
    SbsCompose,
    HybCaption,
    HybCompose,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::AaoMain,
        TemplateId::SbsCaption,
        TemplateId::SbsCompose,
        TemplateId::HybCaption,
        TemplateId::HybCompose,
    ];

    pub fn asset_file(self) -> &'static str {
        match self {
            TemplateId::AaoMain => "aao_main.txt",
            TemplateId::SbsCaption => "sbs_caption.txt",
            TemplateId::SbsCompose => "sbs_compose.txt",
            TemplateId::HybCaption => "hyb_caption.txt",
            TemplateId::HybCompose => "hyb_compose.txt",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemplateId::AaoMain => "AAO_MAIN",
            TemplateId::SbsCaption => "SBS_CAPTION",
            TemplateId::SbsCompose => "SBS_COMPOSE",
            TemplateId::HybCaption => "HYB_CAPTION",
            TemplateId::HybCompose => "HYB_COMPOSE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeedsImage {
    None,
    Single,
    Concatenated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub text: &'static str,
    pub needs_image: NeedsImage,
}

impl PromptTemplate {
    pub fn get(id: TemplateId) -> Self {
        let (text, needs_image) = match id {
            TemplateId::AaoMain => (AAO_MAIN, NeedsImage::Concatenated),
            TemplateId::SbsCaption => (SBS_CAPTION, NeedsImage::Single),
            TemplateId::SbsCompose => (SBS_COMPOSE, NeedsImage::None),
            TemplateId::HybCaption => (HYB_CAPTION, NeedsImage::Single),
            TemplateId::HybCompose => (HYB_COMPOSE, NeedsImage::Concatenated),
        };
        Self {
            template_id: id,
            text,
            needs_image,
        }
    }

    pub fn placeholders(&self) -> Vec<&'static str> {
        [PLACEHOLDER_BEFORE, PLACEHOLDER_AFTER]
            .into_iter()
            .filter(|p| self.text.contains(p))
            .collect()
    }
}

/// Checks the embedded templates against the shipped checksum manifest
/// (`sha256sum` format). Returns the names of files that drifted.
pub fn verify_template_checksums() -> Result<(), Vec<String>> {
    let mut bad = Vec::new();
    for id in TemplateId::ALL {
        let file = id.asset_file();
        let actual = hex::encode(Sha256::digest(PromptTemplate::get(id).text.as_bytes()));
        let listed = CHECKSUMS.lines().find_map(|line| {
            let (sum, name) = line.split_once("  ")?;
            (name.trim() == file).then(|| sum.trim().to_owned())
        });
        if listed.as_deref() != Some(actual.as_str()) {
            bad.push(file.to_owned());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    AllAtOnce,
    StepByStep,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::AllAtOnce, Strategy::StepByStep, Strategy::Hybrid];

    /// Human-facing label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::AllAtOnce => "All-at-Once",
            Strategy::StepByStep => "Step-by-Step",
            Strategy::Hybrid => "Hybrid",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Strategy::AllAtOnce => "all-at-once",
            Strategy::StepByStep => "step-by-step",
            Strategy::Hybrid => "hybrid",
        }
    }

    /// Whether the plan has caption stages (and so uses the captioner).
    pub fn uses_captioner(self) -> bool {
        self != Strategy::AllAtOnce
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        match norm.as_str() {
            "all-at-once" | "aao" => Ok(Strategy::AllAtOnce),
            "step-by-step" | "sbs" => Ok(Strategy::StepByStep),
            "hybrid" | "hyb" => Ok(Strategy::Hybrid),
            _ => Err(format!(
                "unknown strategy {s:?} (expected all-at-once, step-by-step or hybrid)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendRole {
    Captioner,
    Composer,
}

/// Which image a stage attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSubject {
    Before,
    After,
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStage {
    pub template_id: TemplateId,
    pub backend_role: BackendRole,
    pub subject: ImageSubject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub strategy: Strategy,
    pub stages: Vec<PlanStage>,
}

pub fn build_plan(strategy: Strategy) -> StrategyPlan {
    let stage = |template_id, backend_role, subject| PlanStage {
        template_id,
        backend_role,
        subject,
    };
    use BackendRole::*;
    use ImageSubject::*;
    let stages = match strategy {
        Strategy::AllAtOnce => vec![stage(TemplateId::AaoMain, Composer, Pair)],
        Strategy::StepByStep => vec![
            stage(TemplateId::SbsCaption, Captioner, Before),
            stage(TemplateId::SbsCaption, Captioner, After),
            stage(TemplateId::SbsCompose, Composer, Pair),
        ],
        Strategy::Hybrid => vec![
            stage(TemplateId::HybCaption, Captioner, Before),
            stage(TemplateId::HybCaption, Captioner, After),
            stage(TemplateId::HybCompose, Composer, Pair),
        ],
    };
    StrategyPlan { strategy, stages }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    pub caption_before: Option<String>,
    pub caption_after: Option<String>,
}

/// Substitutes the bindings into the stage template and attaches the image
/// the stage calls for.
pub fn render_stage(
    stage: &PlanStage,
    bindings: &Bindings,
    pair: &BiTemporalPair,
    spec: &BackendSpec,
) -> Result<ChatRequest, PromptingError> {
    let template = PromptTemplate::get(stage.template_id);
    let mut text = template.text.to_owned();
    for (placeholder, value) in [
        (PLACEHOLDER_BEFORE, &bindings.caption_before),
        (PLACEHOLDER_AFTER, &bindings.caption_after),
    ] {
        if template.text.contains(placeholder) {
            let value = value.as_deref().ok_or(PromptingError::MissingBinding {
                template: stage.template_id,
                placeholder,
            })?;
            text = text.replace(placeholder, value);
        }
    }

    let attachment = match (template.needs_image, stage.subject) {
        (NeedsImage::None, _) => None,
        (NeedsImage::Single, ImageSubject::Before) => Some(encode_for_transport(&pair.image_before)?),
        (NeedsImage::Single, ImageSubject::After) => Some(encode_for_transport(&pair.image_after)?),
        (NeedsImage::Concatenated, ImageSubject::Pair) => Some(encode_for_transport(
            &concat_side_by_side(&pair.image_before, &pair.image_after, DEFAULT_FILL),
        )?),
        (needs, subject) => {
            return Err(PromptingError::AttachmentMismatch(format!(
                "{} needs {needs:?} image but the stage targets {subject:?}",
                stage.template_id
            )))
        }
    };
    if attachment.is_some() && !spec.supports_images {
        return Err(PromptingError::AttachmentMismatch(format!(
            "{} attaches an image but backend {:?} is text-only",
            stage.template_id, spec.name
        )));
    }
    Ok(ChatRequest {
        messages: vec![Message::user(
            text,
            attachment.into_iter().map(ImagePayload).collect(),
        )],
        spec: spec.clone(),
    })
}

/// Full provenance of one generated explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub pair_id: String,
    pub strategy: Strategy,
    /// Absent for All-at-Once, which only uses the composer.
    pub captioner_backend: Option<String>,
    pub composer_backend: String,
    pub caption_before: Option<String>,
    pub caption_after: Option<String>,
    pub explanation: String,
    pub stage_digests: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub word_count: usize,
}

impl GenerationRecord {
    /// `captioner → composer`, or just the composer for All-at-Once.
    pub fn model_chain(&self) -> String {
        model_chain(self.captioner_backend.as_deref(), &self.composer_backend)
    }
}

pub fn model_chain(captioner: Option<&str>, composer: &str) -> String {
    match captioner {
        Some(c) => format!("{c} → {composer}"),
        None => composer.to_owned(),
    }
}

struct StageOutput {
    text: String,
    digest: String,
}

fn run_stage(
    index: usize,
    request: ChatRequest,
    backend: &Backend,
    cache: &ResponseCache,
) -> Result<StageOutput, PromptingError> {
    let digest = request.cache_key();
    let (resp, hit) = cached_complete(backend, &request, cache)
        .map_err(|source| PromptingError::Stage { index, source })?;
    tracing::debug!(index, hit, digest = %&digest[..12], "stage complete");
    let text = resp.text.trim().to_owned();
    if text.is_empty() {
        return Err(PromptingError::EmptyResponse { index });
    }
    Ok(StageOutput { text, digest })
}

fn check_backends(
    plan: &StrategyPlan,
    captioner: &Backend,
    composer: &Backend,
) -> Result<(), PromptingError> {
    for stage in &plan.stages {
        let backend = match stage.backend_role {
            BackendRole::Captioner => captioner,
            BackendRole::Composer => composer,
        };
        let needs = PromptTemplate::get(stage.template_id).needs_image;
        if needs != NeedsImage::None && !backend.spec.supports_images {
            return Err(PromptingError::AttachmentMismatch(format!(
                "{} needs an image-capable {:?} but {:?} is text-only",
                stage.template_id, stage.backend_role, backend.spec.name
            )));
        }
    }
    Ok(())
}

/// Runs the plan's stages in order. The two caption stages run
/// concurrently; the compose stage waits for both. Every call goes through
/// the response cache.
pub fn execute(
    plan: &StrategyPlan,
    pair: &BiTemporalPair,
    captioner: &Backend,
    composer: &Backend,
    cache: &ResponseCache,
) -> Result<GenerationRecord, PromptingError> {
    check_backends(plan, captioner, composer)?;
    let backend_for = |role| match role {
        BackendRole::Captioner => captioner,
        BackendRole::Composer => composer,
    };

    let (captions, compose_stage) = match plan.stages.as_slice() {
        [compose] => (None, compose),
        [before, after, compose] => {
            let req_before = render_stage(before, &Bindings::default(), pair, &captioner.spec)?;
            let req_after = render_stage(after, &Bindings::default(), pair, &captioner.spec)?;
            let (b, a) = std::thread::scope(|s| {
                let hb = s.spawn(|| run_stage(0, req_before, backend_for(before.backend_role), cache));
                let a = run_stage(1, req_after, backend_for(after.backend_role), cache);
                (hb.join().expect("caption stage panicked"), a)
            });
            (Some((b?, a?)), compose)
        }
        other => unreachable!("plans have 1 or 3 stages, got {}", other.len()),
    };

    let bindings = Bindings {
        caption_before: captions.as_ref().map(|(b, _)| b.text.clone()),
        caption_after: captions.as_ref().map(|(_, a)| a.text.clone()),
    };
    let compose_backend = backend_for(compose_stage.backend_role);
    let compose_index = plan.stages.len() - 1;
    let request = render_stage(compose_stage, &bindings, pair, &compose_backend.spec)?;
    let final_out = run_stage(compose_index, request, compose_backend, cache)?;

    let mut stage_digests = Vec::with_capacity(plan.stages.len());
    if let Some((b, a)) = &captions {
        stage_digests.push(b.digest.clone());
        stage_digests.push(a.digest.clone());
    }
    stage_digests.push(final_out.digest);

    Ok(GenerationRecord {
        pair_id: pair.pair_id.clone(),
        strategy: plan.strategy,
        captioner_backend: plan
            .strategy
            .uses_captioner()
            .then(|| captioner.spec.name.clone()),
        composer_backend: composer.spec.name.clone(),
        caption_before: bindings.caption_before,
        caption_after: bindings.caption_after,
        word_count: word_count(&final_out.text),
        explanation: final_out.text,
        stage_digests,
        created_at: Utc::now(),
    })
}
