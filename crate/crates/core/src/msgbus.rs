//! In-process topic bus and parameter store.
//!
//! Delivery is pull-based: `publish` enqueues onto the topic, `deliver` fans
//! every pending message out to per-subscriber inboxes, and nodes drain their
//! inboxes on their next step. Ordering is fixed by topic registration order,
//! then publish order within a topic, then subscription order.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BusError {
    #[error("invalid topic name {0:?}: expected a slash path such as \"/ego/cmd_vel\"")]
    InvalidTopicName(String),
    #[error("topic {topic} already has schema {existing}, cannot advertise as {requested}")]
    SchemaConflict {
        topic: String,
        existing: Schema,
        requested: Schema,
    },
    #[error("topic {topic} carries {expected} messages, got {got}")]
    SchemaMismatch {
        topic: String,
        expected: Schema,
        got: Schema,
    },
    #[error("subscriber {id:?} is already subscribed to {topic}")]
    DuplicateSubscriberId { topic: String, id: String },
    #[error("message on {0} has a non-finite field")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schema {
    Twist,
    Scalar,
}

impl Schema {
    /// Flattened field names, in serialization order.
    pub fn field_names(self) -> &'static [&'static str] {
        match self {
            Schema::Twist => &[
                "linear.x",
                "linear.y",
                "linear.z",
                "angular.x",
                "angular.y",
                "angular.z",
            ],
            Schema::Scalar => &["data"],
        }
    }

    pub fn field_count(self) -> usize {
        self.field_names().len()
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schema::Twist => f.write_str("Twist"),
            Schema::Scalar => f.write_str("Scalar"),
        }
    }
}

/// Linear and angular components of a velocity message.
///
/// On command topics `angular_z` carries the steering angle rather than a rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear_x: f64,
    pub linear_y: f64,
    pub linear_z: f64,
    pub angular_x: f64,
    pub angular_y: f64,
    pub angular_z: f64,
}

impl Twist {
    pub fn speed(linear_x: f64) -> Self {
        Twist {
            linear_x,
            ..Default::default()
        }
    }

    pub fn fields(&self) -> [f64; 6] {
        [
            self.linear_x,
            self.linear_y,
            self.linear_z,
            self.angular_x,
            self.angular_y,
            self.angular_z,
        ]
    }

    pub fn from_fields(f: [f64; 6]) -> Self {
        Twist {
            linear_x: f[0],
            linear_y: f[1],
            linear_z: f[2],
            angular_x: f[3],
            angular_y: f[4],
            angular_z: f[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    pub data: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Twist(Twist),
    Scalar(Scalar),
}

impl Message {
    pub fn schema(&self) -> Schema {
        match self {
            Message::Twist(_) => Schema::Twist,
            Message::Scalar(_) => Schema::Scalar,
        }
    }

    pub fn fields(&self) -> Vec<f64> {
        match self {
            Message::Twist(t) => t.fields().to_vec(),
            Message::Scalar(s) => vec![s.data],
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Message::Twist(t) => t.is_finite(),
            Message::Scalar(s) => s.data.is_finite(),
        }
    }

    pub fn as_twist(&self) -> Option<&Twist> {
        match self {
            Message::Twist(t) => Some(t),
            Message::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<&Scalar> {
        match self {
            Message::Scalar(s) => Some(s),
            Message::Twist(_) => None,
        }
    }
}

impl From<Twist> for Message {
    fn from(t: Twist) -> Self {
        Message::Twist(t)
    }
}

impl From<Scalar> for Message {
    fn from(s: Scalar) -> Self {
        Message::Scalar(s)
    }
}

/// A message together with the simulation time it was published at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped {
    pub t: f64,
    pub msg: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Double(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Double(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Double(v)
    }
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        ParamValue::Bool(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Str(v.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublisherHandle {
    topic: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriberHandle {
    topic: usize,
    slot: usize,
}

/// One message handed to one subscriber by `deliver`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub topic: String,
    pub subscriber: String,
    pub t: f64,
    pub msg: Message,
}

impl fmt::Display for DeliveryRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} -> {}", self.t, self.topic, self.subscriber)?;
        for v in self.msg.fields() {
            write!(f, " {v}")?;
        }
        Ok(())
    }
}

struct Subscriber {
    id: String,
    inbox: VecDeque<Stamped>,
}

struct Topic {
    name: String,
    // None until advertised; a subscription may create the entry first.
    schema: Option<Schema>,
    pending: VecDeque<Stamped>,
    subscribers: Vec<Subscriber>,
}

#[derive(Default)]
pub struct Bus {
    topics: Vec<Topic>,
    index: HashMap<String, usize>,
    params: BTreeMap<String, ParamValue>,
    published: u64,
    delivered: u64,
    log: Option<Vec<DeliveryRecord>>,
}

fn valid_topic_name(name: &str) -> bool {
    name.len() > 1
        && name.starts_with('/')
        && !name.ends_with('/')
        && name[1..].split('/').all(|seg| !seg.is_empty())
        && !name.chars().any(char::is_whitespace)
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keep a record of every delivery, for ordering and determinism checks.
    pub fn enable_delivery_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn delivery_log(&self) -> &[DeliveryRecord] {
        self.log.as_deref().unwrap_or(&[])
    }

    fn topic_entry(&mut self, name: &str) -> Result<usize, BusError> {
        if !valid_topic_name(name) {
            return Err(BusError::InvalidTopicName(name.to_owned()));
        }
        if let Some(&idx) = self.index.get(name) {
            return Ok(idx);
        }
        let idx = self.topics.len();
        self.topics.push(Topic {
            name: name.to_owned(),
            schema: None,
            pending: VecDeque::new(),
            subscribers: Vec::new(),
        });
        self.index.insert(name.to_owned(), idx);
        Ok(idx)
    }

    pub fn advertise(&mut self, name: &str, schema: Schema) -> Result<PublisherHandle, BusError> {
        let idx = self.topic_entry(name)?;
        let topic = &mut self.topics[idx];
        match topic.schema {
            Some(existing) if existing != schema => Err(BusError::SchemaConflict {
                topic: name.to_owned(),
                existing,
                requested: schema,
            }),
            _ => {
                topic.schema = Some(schema);
                Ok(PublisherHandle { topic: idx })
            }
        }
    }

    pub fn subscribe(&mut self, name: &str, subscriber_id: &str) -> Result<SubscriberHandle, BusError> {
        let idx = self.topic_entry(name)?;
        let topic = &mut self.topics[idx];
        if topic.subscribers.iter().any(|s| s.id == subscriber_id) {
            return Err(BusError::DuplicateSubscriberId {
                topic: name.to_owned(),
                id: subscriber_id.to_owned(),
            });
        }
        topic.subscribers.push(Subscriber {
            id: subscriber_id.to_owned(),
            inbox: VecDeque::new(),
        });
        Ok(SubscriberHandle {
            topic: idx,
            slot: topic.subscribers.len() - 1,
        })
    }

    pub fn publish(&mut self, handle: PublisherHandle, msg: impl Into<Message>, t: f64) -> Result<(), BusError> {
        let msg = msg.into();
        let topic = &mut self.topics[handle.topic];
        // Handles only come from advertise, so the schema is always set.
        let expected = topic.schema.expect("publisher handle on unadvertised topic");
        if msg.schema() != expected {
            return Err(BusError::SchemaMismatch {
                topic: topic.name.clone(),
                expected,
                got: msg.schema(),
            });
        }
        if !msg.is_finite() || !t.is_finite() {
            return Err(BusError::NonFinite(topic.name.clone()));
        }
        topic.pending.push_back(Stamped { t, msg });
        self.published += 1;
        Ok(())
    }

    /// Move all pending messages into subscriber inboxes. Returns the number
    /// of messages (not copies) delivered.
    pub fn deliver(&mut self) -> usize {
        let mut count = 0;
        for topic in &mut self.topics {
            while let Some(stamped) = topic.pending.pop_front() {
                for sub in &mut topic.subscribers {
                    sub.inbox.push_back(stamped);
                    if let Some(log) = self.log.as_mut() {
                        log.push(DeliveryRecord {
                            topic: topic.name.clone(),
                            subscriber: sub.id.clone(),
                            t: stamped.t,
                            msg: stamped.msg,
                        });
                    }
                }
                count += 1;
            }
        }
        self.delivered += count as u64;
        count
    }

    /// Drain everything delivered to this subscriber so far, oldest first.
    pub fn take(&mut self, handle: SubscriberHandle) -> Vec<Stamped> {
        self.topics[handle.topic].subscribers[handle.slot]
            .inbox
            .drain(..)
            .collect()
    }

    /// Drain the inbox and return only the newest message.
    pub fn take_latest(&mut self, handle: SubscriberHandle) -> Option<Stamped> {
        let inbox = &mut self.topics[handle.topic].subscribers[handle.slot].inbox;
        let last = inbox.pop_back();
        inbox.clear();
        last
    }

    pub fn set_param(&mut self, name: &str, value: impl Into<ParamValue>) {
        self.params.insert(name.to_owned(), value.into());
    }

    pub fn get_param(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, ParamValue> {
        &self.params
    }

    /// Advertised topics in registration order.
    pub fn topics(&self) -> impl Iterator<Item = (&str, Schema)> {
        self.topics
            .iter()
            .filter_map(|t| t.schema.map(|s| (t.name.as_str(), s)))
    }

    pub fn schema_of(&self, name: &str) -> Option<Schema> {
        self.index.get(name).and_then(|&i| self.topics[i].schema)
    }

    pub fn published_count(&self) -> u64 {
        self.published
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }
}
