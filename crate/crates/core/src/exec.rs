//! Runs a question plan against one image.

use std::collections::HashMap;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::plan::{Question, QuestionPlan};
use crate::vqa::{now_millis, ImageData, Verdict, VqaError, VqaGateway};

/// One answered question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub question_id: String,
    pub prompt_text: String,
    pub verdict: Verdict,
    pub raw_text: String,
    pub backend_id: String,
    pub timestamp: u64,
    /// Set when the backend never produced a parseable answer and the
    /// verdict defaulted to no.
    pub flagged: bool,
}

/// Ordered answers for one image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub image_ref: String,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn answers(&self) -> HashMap<String, bool> {
        self.entries
            .iter()
            .map(|e| (e.question_id.clone(), e.verdict.as_bool()))
            .collect()
    }

    pub fn flagged(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

fn answer(gateway: &VqaGateway, image: &ImageData, q: &Question) -> Result<TranscriptEntry, VqaError> {
    let (verdict, raw_text, flagged) = match gateway.ask(image, &q.prompt, &q.id) {
        Ok(a) => (a.verdict, a.raw_text, false),
        Err(VqaError::Unparseable { raw }) => (Verdict::No, raw, true),
        Err(e) => return Err(e),
    };
    Ok(TranscriptEntry {
        question_id: q.id.clone(),
        prompt_text: q.prompt.clone(),
        verdict,
        raw_text,
        backend_id: gateway.backend_id().to_string(),
        timestamp: now_millis(),
        flagged,
    })
}

/// Asks the plan's questions frontier by frontier, at most `parallelism`
/// in flight. Entries are recorded in plan order within each frontier, so
/// the transcript does not depend on completion order.
pub fn execute_plan(
    gateway: &VqaGateway,
    image: &ImageData,
    plan: &QuestionPlan,
    parallelism: usize,
) -> Result<Transcript, VqaError> {
    let parallelism = parallelism.max(1);
    let mut answers: HashMap<String, bool> = HashMap::new();
    let mut transcript = Transcript {
        image_ref: image.image_ref.to_string(),
        entries: Vec::new(),
    };
    loop {
        let frontier = plan
            .next_questions(&answers)
            .expect("executor only records answers to plan questions");
        if frontier.is_empty() {
            return Ok(transcript);
        }
        for chunk in frontier.chunks(parallelism) {
            let results: Vec<Result<TranscriptEntry, VqaError>> = if chunk.len() == 1 {
                vec![answer(gateway, image, chunk[0])]
            } else {
                thread::scope(|s| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|q| s.spawn(move || answer(gateway, image, q)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("answer thread panicked"))
                        .collect()
                })
            };
            for r in results {
                let entry = r?;
                answers.insert(entry.question_id.clone(), entry.verdict.as_bool());
                transcript.entries.push(entry);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::plan_attribute_eval;
    use crate::schema::{AttributePart, AttributeSchema, CategoryHint};
    use crate::vqa::{BackendError, VqaBackend, VqaRequest};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    /// Says no to "wing", garbage to "beak" and yes otherwise; tracks concurrency.
    struct Probe {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl VqaBackend for Probe {
        fn id(&self) -> &str {
            "probe"
        }

        fn complete(&self, _: &ImageData, r: &VqaRequest) -> Result<String, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(if r.prompt_text.contains("wing") {
                "no".into()
            } else if r.prompt_text.contains("beak") && !r.prompt_text.ends_with("yes or no.") {
                "unclear".into()
            } else if r.prompt_text.contains("beak") {
                "unclear again".into()
            } else {
                "yes".into()
            })
        }
    }

    fn schema() -> AttributeSchema {
        let parts = ["tail", "wing", "eye", "leg", "beak", "crest"]
            .iter()
            .map(|p| AttributePart::new(*p, "fine").unwrap())
            .collect();
        AttributeSchema::new("bird", "bird", CategoryHint::Animal, parts).unwrap()
    }

    #[test]
    fn respects_parallelism_and_gating() {
        let probe = Arc::new(Probe {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = VqaGateway::new(probe.clone());
        let img = ImageData::from_bytes(b"x".to_vec());
        let plan = plan_attribute_eval(&schema());
        let t = execute_plan(&gw, &img, &plan, 3).unwrap();
        assert!(probe.peak.load(Ordering::SeqCst) <= 3);
        // existence + 6 visibility + 4 match (wing invisible, beak unparseable)
        assert_eq!(t.entries.len(), 11);
        assert!(!t.entries.iter().any(|e| e.question_id == "bird/match/1"));
        let flagged: Vec<_> = t.flagged().map(|e| e.question_id.as_str()).collect();
        assert_eq!(flagged, ["bird/visibility/4"]);
        assert!(!t.answers()["bird/visibility/4"]);
    }

    #[test]
    fn order_is_independent_of_parallelism() {
        let img = ImageData::from_bytes(b"x".to_vec());
        let plan = plan_attribute_eval(&schema());
        let ids = |p| {
            let gw = VqaGateway::new(Arc::new(Probe {
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }));
            execute_plan(&gw, &img, &plan, p)
                .unwrap()
                .entries
                .into_iter()
                .map(|e| (e.question_id, e.verdict))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(1), ids(4));
    }
}
