//! A text household: receptacles holding objects, one agent that walks
//! between them carrying at most one object, and a goal predicate checked
//! after every action.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const NOTHING_HAPPENS: &str = "Nothing happens.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Receptacle {
    pub name: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub openable: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub open: bool,
    #[serde(default)]
    pub objects: Vec<String>,
}

impl Receptacle {
    pub fn new(name: impl Into<String>) -> Self {
        Receptacle {
            name: name.into(),
            openable: false,
            open: false,
            objects: Vec::new(),
        }
    }

    pub fn openable(mut self) -> Self {
        self.openable = true;
        self
    }

    pub fn with(mut self, object: impl Into<String>) -> Self {
        self.objects.push(object.into());
        self
    }

    fn accessible(&self) -> bool {
        !self.openable || self.open
    }
}

/// `"soapbar 1"` → `"soapbar"`.
pub fn object_type(name: &str) -> &str {
    match name.rsplit_once(' ') {
        Some((head, tail)) if tail.chars().all(|c| c.is_ascii_digit()) => head,
        _ => name,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Treatment {
    Heated,
    Cooled,
    Cleaned,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectState {
    pub heated: bool,
    pub cooled: bool,
    pub cleaned: bool,
}

impl ObjectState {
    fn has(&self, t: Treatment) -> bool {
        match t {
            Treatment::Heated => self.heated,
            Treatment::Cooled => self.cooled,
            Treatment::Cleaned => self.cleaned,
        }
    }
}

fn default_count() -> usize {
    1
}

/// What must hold for the task to be done.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    /// Object type, e.g. `apple`.
    pub object: String,
    /// Receptacle type or exact name the object must end up in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<String>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<Treatment>,
    /// Done when a desklamp is turned on while holding the object.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub examine_with_lamp: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HouseStep {
    pub observation: String,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Household {
    pub receptacles: Vec<Receptacle>,
    pub location: Option<String>,
    pub carrying: Option<String>,
    pub states: BTreeMap<String, ObjectState>,
    pub goal: Goal,
    examined: bool,
}

fn listing(objects: &[String]) -> String {
    match objects {
        [] => "nothing".to_string(),
        [one] => format!("a {one}"),
        many => {
            let (last, head) = many.split_last().expect("non-empty");
            let head: Vec<String> = head.iter().map(|o| format!("a {o}")).collect();
            format!("{}, and a {last}", head.join(", "))
        }
    }
}

impl Household {
    pub fn new(receptacles: Vec<Receptacle>, goal: Goal) -> Self {
        Household {
            receptacles,
            location: None,
            carrying: None,
            states: BTreeMap::new(),
            goal,
            examined: false,
        }
    }

    fn receptacle(&self, name: &str) -> Option<usize> {
        self.receptacles.iter().position(|r| r.name == name)
    }

    fn here(&self) -> Option<usize> {
        self.location.as_deref().and_then(|l| self.receptacle(l))
    }

    /// Every object instance, carried or placed.
    pub fn object_count(&self) -> usize {
        self.receptacles.iter().map(|r| r.objects.len()).sum::<usize>() + usize::from(self.carrying.is_some())
    }

    pub fn goal_holds(&self) -> bool {
        let g = &self.goal;
        if g.examine_with_lamp {
            return self.examined;
        }
        let Some(dest) = &g.destination else {
            return false;
        };
        let placed = self
            .receptacles
            .iter()
            .filter(|r| r.name == *dest || object_type(&r.name) == dest)
            .flat_map(|r| r.objects.iter())
            .filter(|o| object_type(o) == g.object)
            .filter(|o| {
                g.treatment
                    .is_none_or(|t| self.states.get(*o).copied().unwrap_or_default().has(t))
            })
            .count();
        placed >= g.count
    }

    /// Actions that would change state or produce feedback from here.
    pub fn valid_actions(&self) -> Vec<String> {
        let mut out: Vec<String> = self.receptacles.iter().map(|r| format!("go to {}", r.name)).collect();
        if let Some(i) = self.here() {
            let r = &self.receptacles[i];
            if r.openable {
                out.push(format!("{} {}", if r.open { "close" } else { "open" }, r.name));
            }
            if r.accessible() {
                if self.carrying.is_none() {
                    for o in r.objects.iter().filter(|o| object_type(o) != "desklamp") {
                        out.push(format!("take {o} from {}", r.name));
                    }
                }
                for o in r.objects.iter().filter(|o| object_type(o) == "desklamp") {
                    out.push(format!("use {o}"));
                }
            }
            if let Some(c) = &self.carrying {
                if r.accessible() {
                    out.push(format!("put {c} in/on {}", r.name));
                }
                let verb = match object_type(&r.name) {
                    "microwave" => Some("heat"),
                    "fridge" => Some("cool"),
                    "sinkbasin" => Some("clean"),
                    _ => None,
                };
                if let Some(v) = verb {
                    out.push(format!("{v} {c} with {}", r.name));
                }
            }
        }
        out.push("look".into());
        out.push("inventory".into());
        out
    }

    /// Applies one action and reports feedback plus whether the goal now holds.
    pub fn step(&mut self, action: &str) -> HouseStep {
        let observation = self.apply(action.trim()).unwrap_or_else(|| NOTHING_HAPPENS.to_string());
        HouseStep {
            observation,
            done: self.goal_holds(),
        }
    }

    fn apply(&mut self, action: &str) -> Option<String> {
        if let Some(target) = action.strip_prefix("go to ") {
            let i = self.receptacle(target)?;
            self.location = Some(target.to_string());
            let r = &self.receptacles[i];
            return Some(if r.accessible() {
                format!("You arrive at {}. On the {}, you see {}.", r.name, r.name, listing(&r.objects))
            } else {
                format!("You arrive at {}. The {} is closed.", r.name, r.name)
            });
        }
        if let Some(target) = action.strip_prefix("open ") {
            let i = self.here().filter(|&i| self.receptacles[i].name == target)?;
            let r = &mut self.receptacles[i];
            if !r.openable || r.open {
                return None;
            }
            r.open = true;
            return Some(format!(
                "You open the {}. The {} is open. In it, you see {}.",
                r.name,
                r.name,
                listing(&r.objects)
            ));
        }
        if let Some(target) = action.strip_prefix("close ") {
            let i = self.here().filter(|&i| self.receptacles[i].name == target)?;
            let r = &mut self.receptacles[i];
            if !r.openable || !r.open {
                return None;
            }
            r.open = false;
            return Some(format!("You close the {}.", r.name));
        }
        if let Some(rest) = action.strip_prefix("take ") {
            let (obj, from) = rest.split_once(" from ")?;
            let i = self.here().filter(|&i| self.receptacles[i].name == from)?;
            if self.carrying.is_some() || object_type(obj) == "desklamp" || !self.receptacles[i].accessible() {
                return None;
            }
            let r = &mut self.receptacles[i];
            let pos = r.objects.iter().position(|o| o == obj)?;
            let obj = r.objects.remove(pos);
            let msg = format!("You pick up the {obj} from the {}.", r.name);
            self.carrying = Some(obj);
            return Some(msg);
        }
        if let Some(rest) = action.strip_prefix("put ") {
            let (obj, to) = rest
                .split_once(" in/on ")
                .or_else(|| rest.split_once(" in "))
                .or_else(|| rest.split_once(" on "))?;
            let i = self.here().filter(|&i| self.receptacles[i].name == to)?;
            if self.carrying.as_deref() != Some(obj) || !self.receptacles[i].accessible() {
                return None;
            }
            let obj = self.carrying.take().expect("checked");
            let r = &mut self.receptacles[i];
            let msg = format!("You put the {obj} in/on the {}.", r.name);
            r.objects.push(obj);
            return Some(msg);
        }
        for (verb, appliance, past) in [
            ("heat", "microwave", Treatment::Heated),
            ("cool", "fridge", Treatment::Cooled),
            ("clean", "sinkbasin", Treatment::Cleaned),
        ] {
            if let Some(rest) = action.strip_prefix(verb).and_then(|r| r.strip_prefix(' ')) {
                let (obj, with) = rest.split_once(" with ")?;
                let i = self.here().filter(|&i| self.receptacles[i].name == with)?;
                if object_type(with) != appliance || self.carrying.as_deref() != Some(obj) {
                    return None;
                }
                let state = self.states.entry(obj.to_string()).or_default();
                match past {
                    Treatment::Heated => state.heated = true,
                    Treatment::Cooled => state.cooled = true,
                    Treatment::Cleaned => state.cleaned = true,
                }
                return Some(format!("You {verb} the {obj} using the {}.", self.receptacles[i].name));
            }
        }
        if let Some(lamp) = action.strip_prefix("use ") {
            let i = self.here()?;
            let r = &self.receptacles[i];
            if object_type(lamp) != "desklamp" || !r.accessible() || !r.objects.iter().any(|o| o == lamp) {
                return None;
            }
            if let Some(c) = &self.carrying {
                if object_type(c) == self.goal.object {
                    self.examined = true;
                }
            }
            return Some(format!("You turn on the {lamp}."));
        }
        match action {
            "look" => Some(match &self.location {
                Some(l) => format!("You are facing the {l}. Next to it, you see nothing."),
                None => {
                    let names: Vec<String> = self.receptacles.iter().map(|r| r.name.clone()).collect();
                    format!(
                        "You are in the middle of a room. Looking quickly around you, you see {}.",
                        listing(&names)
                    )
                }
            }),
            "inventory" => Some(match &self.carrying {
                Some(c) => format!("You are carrying: a {c}."),
                None => "You are not carrying anything.".to_string(),
            }),
            _ => None,
        }
    }
}
