use std::sync::Arc;

use crate::error::{Error, Result};
use crate::protocol::frame::{Message, Topic};

/// Receives every message of one topic family.
pub trait MessageHandler: Send + Sync {
    fn handle(&self, msg: Message) -> Result<()>;
}

impl<F> MessageHandler for F
where
    F: Fn(Message) -> Result<()> + Send + Sync,
{
    fn handle(&self, msg: Message) -> Result<()> {
        self(msg)
    }
}

/// Routes RELAT, TRAIN and MODEL messages to their handlers.
#[derive(Clone)]
pub struct Dispatcher {
    relationship: Arc<dyn MessageHandler>,
    training: Arc<dyn MessageHandler>,
    transfer: Arc<dyn MessageHandler>,
}

#[derive(Default)]
pub struct DispatcherBuilder {
    relationship: Option<Arc<dyn MessageHandler>>,
    training: Option<Arc<dyn MessageHandler>>,
    transfer: Option<Arc<dyn MessageHandler>>,
}

impl DispatcherBuilder {
    pub fn relationship(mut self, h: impl MessageHandler + 'static) -> Self {
        self.relationship = Some(Arc::new(h));
        self
    }

    pub fn training(mut self, h: impl MessageHandler + 'static) -> Self {
        self.training = Some(Arc::new(h));
        self
    }

    pub fn transfer(mut self, h: impl MessageHandler + 'static) -> Self {
        self.transfer = Some(Arc::new(h));
        self
    }

    /// Fails if any topic lacks a handler.
    pub fn build(self) -> Result<Dispatcher> {
        let missing = |name: &str| Error::Config(format!("no {name} handler registered"));
        Ok(Dispatcher {
            relationship: self.relationship.ok_or_else(|| missing("relationship (RELAT)"))?,
            training: self.training.ok_or_else(|| missing("training (TRAIN)"))?,
            transfer: self.transfer.ok_or_else(|| missing("transfer (MODEL)"))?,
        })
    }
}

impl Dispatcher {
    pub fn builder() -> DispatcherBuilder {
        DispatcherBuilder::default()
    }

    pub fn dispatch(&self, msg: Message) -> Result<()> {
        match msg.topic() {
            Topic::Relat => self.relationship.handle(msg),
            Topic::Train => self.training.handle(msg),
            Topic::Model => self.transfer.handle(msg),
        }
    }
}
