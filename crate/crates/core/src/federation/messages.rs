use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Server to client.
    Down,
    /// Client to server.
    Up,
}

/// The only things that ever cross the client boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Current α and anchor set.
    SharedParameters,
    /// A client's proposed α_i and local anchor set.
    LocalProposal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub direction: Direction,
    pub client: usize,
    pub payload: PayloadKind,
    pub bytes: u64,
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::Down => "down",
            Direction::Up => "up",
        };
        let kind = match self.payload {
            PayloadKind::SharedParameters => "shared_parameters",
            PayloadKind::LocalProposal => "local_proposal",
        };
        write!(f, "{}\t{dir}\t{}\t{kind}\t{}", self.round, self.client, self.bytes)
    }
}

/// Append-only record of simulated traffic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageLog {
    entries: Vec<Message>,
}

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: Message) {
        self.entries.push(m);
    }

    pub fn entries(&self) -> &[Message] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn in_round(&self, round: usize) -> impl Iterator<Item = &Message> {
        self.entries.iter().filter(move |m| m.round == round)
    }

    /// `(bytes up, bytes down)` for one round.
    pub fn round_bytes(&self, round: usize) -> (u64, u64) {
        self.in_round(round).fold((0, 0), |(up, down), m| match m.direction {
            Direction::Up => (up + m.bytes, down),
            Direction::Down => (up, down + m.bytes),
        })
    }

    /// Tab-separated text, one line per message, with a header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("round\tdirection\tclient\tpayload\tbytes\n");
        for m in &self.entries {
            out.push_str(&m.to_string());
            out.push('\n');
        }
        out
    }
}
