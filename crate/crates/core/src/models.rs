//! Model files shipped with the crate, addressable by name.

use crate::model::{parse_model, LoadedModel, ModelError};

const BUNDLED: &[(&str, &str)] = &[
    ("chain4", include_str!("../models/chain4.sysdl")),
    ("chain8", include_str!("../models/chain8.sysdl")),
    ("chemotaxis", include_str!("../models/chemotaxis.sysdl")),
    ("hopfield13", include_str!("../models/hopfield13.sysdl")),
    ("hopfield13-rewired", include_str!("../models/hopfield13-rewired.sysdl")),
    ("hsym", include_str!("../models/hsym.sysdl")),
    ("i1ffl", include_str!("../models/i1ffl.sysdl")),
    ("quorum-chemotaxis", include_str!("../models/quorum-chemotaxis.sysdl")),
    ("quorum-chemotaxis-virtual", include_str!("../models/quorum-chemotaxis-virtual.sysdl")),
    ("quorum-delay", include_str!("../models/quorum-delay.sysdl")),
    ("quorum-periodic", include_str!("../models/quorum-periodic.sysdl")),
    ("quorum-periodic-cell", include_str!("../models/quorum-periodic-cell.sysdl")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled_model(name: &str) -> Option<Result<LoadedModel, ModelError>> {
    bundled_source(name).map(parse_model)
}
