//! Thin async client for the `/v1` annotation API.

use ordepth_core::annotation::Answer;
use ordepth_core::api::{
    AnswerRequest, AnswerView, CreateSessionRequest, ErrorBody, Health, ItemView, QuestionView, SessionView,
};
use ordepth_core::supervision::RelationSet;
pub use reqwest::StatusCode;
use reqwest::Response;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error status.
    #[error("{status}: {}", body.message)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: "unknown".into(),
            message: text,
        });
        Err(ClientError::Api { status, body })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.http.get(self.url(path)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::decode(self.http.post(self.url(path)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn create_session(&self, item_id: &str) -> Result<SessionView> {
        self.post("/v1/sessions", &CreateSessionRequest { item_id: item_id.into() })
            .await
    }

    pub async fn question(&self, session_id: &str) -> Result<QuestionView> {
        self.get(&format!("/v1/sessions/{session_id}/question")).await
    }

    pub async fn answer(&self, session_id: &str, answer: Answer) -> Result<AnswerView> {
        self.answer_raw(session_id, &AnswerRequest::new(answer)).await
    }

    /// Posts an arbitrary answer body, including unknown literals or `seq`.
    pub async fn answer_raw(&self, session_id: &str, req: &AnswerRequest) -> Result<AnswerView> {
        self.post(&format!("/v1/sessions/{session_id}/answer"), req).await
    }

    pub async fn relations(&self, session_id: &str) -> Result<RelationSet> {
        self.get(&format!("/v1/sessions/{session_id}/relations")).await
    }

    pub async fn item(&self, item_id: &str) -> Result<ItemView> {
        self.get(&format!("/v1/items/{item_id}")).await
    }

    /// Answers questions with `oracle` until the session completes and
    /// returns the final view.
    pub async fn drive<F>(&self, session_id: &str, mut oracle: F) -> Result<QuestionView>
    where
        F: FnMut(usize, usize) -> Answer,
    {
        loop {
            let q = self.question(session_id).await?;
            match q.question {
                Some(p) => {
                    self.answer(session_id, oracle(p.i, p.j)).await?;
                }
                None => return Ok(q),
            }
        }
    }
}
