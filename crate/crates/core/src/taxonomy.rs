//! Class tags: every class is a general moving object (GMO), a general
//! static object (GSO) or unoccupied, which is neither.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Unoccupied,
    Gmo,
    Gso,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    All,
    Gmo,
    Gso,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub names: Vec<String>,
    pub tags: Vec<Tag>,
}

impl ClassTaxonomy {
    pub fn new(names: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        let t = Self { names, tags };
        t.validate()?;
        Ok(t)
    }

    /// Synthetic world classes: 0 empty, 1 ground, 2 wall (when C >= 4),
    /// everything after that a moving box class.
    pub fn synthetic(classes: usize) -> Result<Self> {
        if classes < 3 {
            return Err(CoreError::Spec(format!(
                "need at least 3 classes (empty, static, moving), got {classes}"
            )));
        }
        let mut names = vec!["empty".to_string(), "ground".to_string()];
        let mut tags = vec![Tag::Unoccupied, Tag::Gso];
        if classes >= 4 {
            names.push("wall".into());
            tags.push(Tag::Gso);
        }
        let first_mover = names.len();
        for k in first_mover..classes {
            names.push(if k == first_mover { "box".into() } else { format!("box{}", k - first_mover + 1) });
            tags.push(Tag::Gmo);
        }
        Self::new(names, tags)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.tags.len() {
            return Err(CoreError::Config(format!(
                "taxonomy has {} names but {} tags",
                self.names.len(),
                self.tags.len()
            )));
        }
        if self.tags.is_empty() {
            return Err(CoreError::Config("taxonomy has no classes".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.tags.len()
    }

    pub fn tag(&self, class: usize) -> Tag {
        self.tags[class]
    }

    pub fn is_occupied(&self, class: usize) -> bool {
        self.tags[class] != Tag::Unoccupied
    }

    pub fn in_group(&self, class: usize, group: Group) -> bool {
        match (group, self.tags[class]) {
            (_, Tag::Unoccupied) => false,
            (Group::All, _) => true,
            (Group::Gmo, t) => t == Tag::Gmo,
            (Group::Gso, t) => t == Tag::Gso,
        }
    }

    pub fn classes_with(&self, tag: Tag) -> Vec<usize> {
        (0..self.tags.len()).filter(|&c| self.tags[c] == tag).collect()
    }
}
