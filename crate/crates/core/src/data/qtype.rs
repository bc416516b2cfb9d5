use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The twelve question categories of the per-type report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Reading,
    ActivityRecognition,
    PositionalReasoning,
    ObjectRecognition,
    Counting,
    ObjectPresence,
    SceneRecognition,
    SentimentUnderstanding,
    Color,
    Attribute,
    UtilityAffordance,
    SportRecognition,
}

impl QuestionType {
    pub const ALL: [QuestionType; 12] = [
        QuestionType::Reading,
        QuestionType::ActivityRecognition,
        QuestionType::PositionalReasoning,
        QuestionType::ObjectRecognition,
        QuestionType::Counting,
        QuestionType::ObjectPresence,
        QuestionType::SceneRecognition,
        QuestionType::SentimentUnderstanding,
        QuestionType::Color,
        QuestionType::Attribute,
        QuestionType::UtilityAffordance,
        QuestionType::SportRecognition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Reading => "reading",
            QuestionType::ActivityRecognition => "activity_recognition",
            QuestionType::PositionalReasoning => "positional_reasoning",
            QuestionType::ObjectRecognition => "object_recognition",
            QuestionType::Counting => "counting",
            QuestionType::ObjectPresence => "object_presence",
            QuestionType::SceneRecognition => "scene_recognition",
            QuestionType::SentimentUnderstanding => "sentiment_understanding",
            QuestionType::Color => "color",
            QuestionType::Attribute => "attribute",
            QuestionType::UtilityAffordance => "utility_affordance",
            QuestionType::SportRecognition => "sport_recognition",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&q| q == self).expect("listed")
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown question type {s:?}")))
    }
}

/// Ordered: the first matching pattern decides.
static TABLE: LazyLock<Vec<(QuestionType, Regex)>> = LazyLock::new(|| {
    use QuestionType::*;
    [
        (Reading, r"\b(read|written|write|says?|text|words?|letters?|brand|number on|name on|sign say)\b"),
        (Counting, r"\bhow many\b|\bnumber of\b"),
        (Color, r"\bwhat colou?rs?\b|\bwhich colou?r\b|\bcolou?r of\b|\bcolou?r is\b"),
        (SportRecognition, r"\b(sports?|tennis|baseball|soccer|football|frisbee|skiing|surfing|skateboarding|snowboarding)\b"),
        (ActivityRecognition, r"\bdoing\b|\bactivity\b|\bwhat (is|are) .+ (eating|holding|playing|watching|riding)\b"),
        (SentimentUnderstanding, r"\b(happy|sad|angry|feel|feeling|feelings|mood|emotion|smiling|scared|excited)\b"),
        (SceneRecognition, r"\b(what (room|place|kind of (place|room|scene))|where was|where is this|indoors|outdoors|what city|what country|scene)\b"),
        (UtilityAffordance, r"\b(used for|use for|purpose|for what|what (is|are) .+ for$|can (you|i|one) use)\b"),
        (ObjectPresence, r"\b(is|are) there\b|\bdo you see\b|\bcan you see\b"),
        (PositionalReasoning, r"\b(left|right|top|bottom|above|below|behind|beside|under|underneath|next to|in front of|where)\b"),
        (Attribute, r"\b(what (kind|type|size|material|pattern)|made of|how (big|tall|old|large|small|long))\b"),
        (ObjectRecognition, r"\bwhat (is|are) (this|that|these|those|the)\b|\bwhat shape\b|\bwhat object\b"),
    ]
    .into_iter()
    .map(|(q, p)| (q, Regex::new(p).expect("valid pattern")))
    .collect()
});

/// Assigns a question to a category; falls back to object recognition.
pub fn classify_question_type(question: &str) -> QuestionType {
    let q = question.trim().to_lowercase();
    TABLE
        .iter()
        .find(|(_, re)| re.is_match(&q))
        .map(|(t, _)| *t)
        .unwrap_or(QuestionType::ObjectRecognition)
}
