//! JSON payloads of the `/v1` annotation API and the item registry file.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{Answer, AnnotationSession, SessionStatus};
use crate::error::{Error, Result};
use crate::geometry::{project, Pose2D, Pose3D, Skeleton, WeakPerspectiveCamera};

pub const API_PREFIX: &str = "/v1";
pub const REGISTRY_VERSION: u32 = 1;

/// One pose to annotate. `pose_3d` is the synthetic ground truth used by
/// the simulated annotator; the service never sends it to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub pose_2d: Pose2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_3d: Option<Pose3D>,
}

/// Contents of `registry.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRegistry {
    pub version: u32,
    pub seed: u64,
    pub skeleton: Skeleton,
    pub camera: WeakPerspectiveCamera,
    pub items: Vec<Item>,
}

impl ItemRegistry {
    /// Registry of projected poses with their 3D ground truth.
    pub fn from_poses(
        seed: u64,
        skeleton: Skeleton,
        camera: WeakPerspectiveCamera,
        poses: &[Pose3D],
    ) -> Result<Self> {
        let items = poses
            .iter()
            .enumerate()
            .map(|(k, pose)| {
                Ok(Item {
                    item_id: format!("item-{k:05}"),
                    pose_2d: project(pose, &camera)?,
                    pose_3d: Some(pose.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let registry = ItemRegistry {
            version: REGISTRY_VERSION,
            seed,
            skeleton,
            camera,
            items,
        };
        registry.validate()?;
        Ok(registry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != REGISTRY_VERSION {
            return Err(Error::Format(format!("unsupported registry version {}", self.version)));
        }
        self.skeleton.validate()?;
        let n = self.skeleton.joint_count();
        let mut ids = HashSet::with_capacity(self.items.len());
        for item in &self.items {
            if item.item_id.is_empty() {
                return Err(Error::Format("empty item id".into()));
            }
            if !ids.insert(item.item_id.as_str()) {
                return Err(Error::Format(format!("duplicate item id {:?}", item.item_id)));
            }
            if item.pose_2d.len() != n || !item.pose_2d.is_finite() {
                return Err(Error::Format(format!(
                    "item {:?}: 2D pose must have {n} finite joints",
                    item.item_id
                )));
            }
            if let Some(p) = &item.pose_3d {
                if p.len() != n || !p.is_finite() {
                    return Err(Error::Format(format!(
                        "item {:?}: 3D pose must have {n} finite joints",
                        item.item_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let registry: ItemRegistry =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        registry.validate()?;
        Ok(registry)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Display payload for `GET /v1/items/{id}`.
    pub fn view(&self, item: &Item) -> ItemView {
        ItemView {
            item_id: item.item_id.clone(),
            skeleton_id: self.skeleton.id.clone(),
            joint_names: self.skeleton.joint_names.clone(),
            edges: edges(&self.skeleton),
            pose_2d: item.pose_2d.clone(),
        }
    }
}

fn edges(skeleton: &Skeleton) -> Vec<[usize; 2]> {
    skeleton.edges().into_iter().map(|(a, b)| [a, b]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub skeleton_id: String,
    pub joint_names: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    pub pose_2d: Pose2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub item_id: String,
    pub joint_count: usize,
    pub status: SessionStatus,
    pub question_count: usize,
}

impl SessionView {
    pub fn of(session_id: &str, s: &AnnotationSession) -> Self {
        SessionView {
            session_id: session_id.into(),
            item_id: s.item_id.clone(),
            joint_count: s.joint_count,
            status: s.status,
            question_count: s.question_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
}

/// What to draw for a pending question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDisplay {
    pub pose_2d: Pose2D,
    pub edges: Vec<[usize; 2]>,
    pub joint_names: Vec<String>,
    pub highlight: [usize; 2],
}

/// Either the pending question or, once complete, the final ordering
/// (closest class first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub question_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<QuestionDisplay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<Vec<Vec<usize>>>,
}

impl QuestionView {
    pub fn of(session_id: &str, s: &AnnotationSession, registry: &ItemRegistry) -> Result<Self> {
        let mut view = QuestionView {
            session_id: session_id.into(),
            status: s.status,
            question_count: s.question_count,
            question: None,
            display: None,
            ordering: None,
        };
        match s.next_question() {
            Some((i, j)) => {
                view.question = Some(Pair { i, j });
                if let Some(item) = registry.get(&s.item_id) {
                    view.display = Some(QuestionDisplay {
                        pose_2d: item.pose_2d.clone(),
                        edges: edges(&registry.skeleton),
                        joint_names: registry.skeleton.joint_names.clone(),
                        highlight: [i, j],
                    });
                }
            }
            None => view.ordering = Some(s.final_ordering()?),
        }
        Ok(view)
    }
}

/// Body of `POST /v1/sessions/{id}/answer`. The answer stays a string so
/// that unknown literals can be rejected with a 400 rather than a decode
/// failure. `seq`, when present, must equal the current question count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<usize>,
}

impl AnswerRequest {
    pub fn new(answer: Answer) -> Self {
        AnswerRequest {
            answer: answer.as_str().into(),
            seq: None,
        }
    }

    pub fn parse(&self) -> Result<Answer> {
        self.answer.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerView {
    pub session_id: String,
    pub accepted: Answer,
    pub status: SessionStatus,
    pub question_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub items: usize,
    pub sessions: usize,
}
