//! Typed client for the session service endpoints.

use colorvib_core::session::api::{
    ActionResponse, AdvanceRequest, CalibrationStepRequest, CalibrationStepResponse, CurrentTrialView, ErrorBody,
    QuestionnaireRequest, ResponsePayload, ResponseRequest, StartRequest, StartResponse, StateResponse, API_VERSION,
};
use colorvib_core::session::calibration::CalibrationInput;
use colorvib_core::session::plan::StudyKind;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with an error body.
    #[error("service returned {status}: {} ({})", body.message, body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("unexpected reply ({status}): {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    /// Machine-readable error kind for service-side refusals.
    pub fn api_code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:7878`.
    pub fn new(base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if status.is_success() {
            if let Ok(v) = serde_json::from_slice(&bytes) {
                return Ok(v);
            }
        } else if let Ok(body) = serde_json::from_slice::<ErrorBody>(&bytes) {
            return Err(ClientError::Api {
                status: status.as_u16(),
                body,
            });
        }
        Err(ClientError::Unexpected {
            status: status.as_u16(),
            text: String::from_utf8_lossy(&bytes).into_owned(),
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(self.http.get(self.url(path)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(self.url(path)).json(body).send().await?).await
    }

    pub async fn state(&self) -> Result<StateResponse, ClientError> {
        self.get("/session/state").await
    }

    pub async fn start(&self, participant: &str, kind: StudyKind, seed: u64, resume: bool) -> Result<StartResponse, ClientError> {
        let req = StartRequest {
            version: API_VERSION,
            participant: participant.to_string(),
            kind,
            seed,
            resume,
        };
        self.post("/session/start", &req).await
    }

    pub async fn current_trial(&self) -> Result<CurrentTrialView, ClientError> {
        self.get("/trial/current").await
    }

    pub async fn respond(&self, response: ResponsePayload) -> Result<ActionResponse, ClientError> {
        let req = ResponseRequest {
            version: API_VERSION,
            response,
        };
        self.post("/trial/response", &req).await
    }

    pub async fn advance(&self) -> Result<ActionResponse, ClientError> {
        self.post("/trial/advance", &AdvanceRequest { version: API_VERSION }).await
    }

    pub async fn calibration_step(&self, input: CalibrationInput) -> Result<CalibrationStepResponse, ClientError> {
        let req = CalibrationStepRequest {
            version: API_VERSION,
            input,
        };
        self.post("/calibration/step", &req).await
    }

    pub async fn questionnaire(&self, naturalness: u8, obtrusiveness: u8) -> Result<ActionResponse, ClientError> {
        let req = QuestionnaireRequest {
            version: API_VERSION,
            naturalness,
            obtrusiveness,
        };
        self.post("/questionnaire", &req).await
    }

    /// PNG bytes of frame `a` or `b` of a stimulus.
    pub async fn stimulus_frame(&self, id: &str, frame_b: bool) -> Result<Vec<u8>, ClientError> {
        let path = format!("/stimulus/{id}/{}", if frame_b { "b" } else { "a" });
        let resp = self.http.get(self.url(&path)).send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.bytes().await?.to_vec());
        }
        Self::decode::<()>(resp).await.and(Err(ClientError::Unexpected {
            status: status.as_u16(),
            text: String::new(),
        }))
    }
}
