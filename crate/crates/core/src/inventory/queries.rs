use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{ConsumptionEntry, ContainerRecord, Inventory, InventoryError, Location};
use crate::telemetry::TagId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerQuantity {
    pub tag_id: TagId,
    pub location: Location,
    pub net_g: f64,
    pub checked_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Remaining {
    pub chemical_id: String,
    /// Net grams in containers that are not checked out.
    pub available_g: f64,
    pub total_g: f64,
    pub containers: Vec<ContainerQuantity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyTotal {
    pub day: NaiveDate,
    pub total_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub chemical_id: String,
    pub entries: Vec<ConsumptionEntry>,
    /// UTC days that have at least one entry, ascending.
    pub daily: Vec<DailyTotal>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChemicalSummary {
    pub chemical_id: String,
    pub name: String,
    pub hazard_class: String,
    pub reorder_lead_time_days: f64,
    pub available_g: f64,
    pub total_g: f64,
    pub containers: Vec<ContainerQuantity>,
}

/// UTC calendar day of a millisecond timestamp.
pub fn utc_day(ms: i64) -> NaiveDate {
    DateTime::from_timestamp_millis(ms)
        .map(|t| t.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

fn quantity(c: &ContainerRecord) -> ContainerQuantity {
    ContainerQuantity {
        tag_id: c.tag_id.clone(),
        location: c.location.clone(),
        net_g: c.net_g(),
        checked_out: c.is_checked_out(),
    }
}

impl Inventory {
    pub fn remaining_quantity(&self, chemical_id: &str) -> Result<Remaining, InventoryError> {
        if !self.chemicals.contains_key(chemical_id) {
            return Err(InventoryError::UnknownChemical(chemical_id.to_string()));
        }
        let containers: Vec<ContainerQuantity> = self
            .containers
            .values()
            .filter(|c| c.chemical_id == chemical_id)
            .map(quantity)
            .collect();
        let total_g = containers.iter().map(|c| c.net_g).sum();
        let available_g = containers.iter().filter(|c| !c.checked_out).map(|c| c.net_g).sum();
        Ok(Remaining {
            chemical_id: chemical_id.to_string(),
            available_g,
            total_g,
            containers,
        })
    }

    /// Entries whose return time falls in `[from_ms, to_ms)`, in ledger order.
    pub fn consumption_history(
        &self,
        chemical_id: &str,
        from_ms: i64,
        to_ms: i64,
    ) -> Result<History, InventoryError> {
        if from_ms > to_ms {
            return Err(InventoryError::ReversedRange { from_ms, to_ms });
        }
        if !self.chemicals.contains_key(chemical_id) {
            return Err(InventoryError::UnknownChemical(chemical_id.to_string()));
        }
        let entries: Vec<ConsumptionEntry> = self
            .ledger
            .iter()
            .filter(|e| e.chemical_id == chemical_id && e.t_in_ms >= from_ms && e.t_in_ms < to_ms)
            .cloned()
            .collect();
        let mut days: BTreeMap<NaiveDate, f64> = BTreeMap::new();
        for e in &entries {
            *days.entry(utc_day(e.t_in_ms)).or_insert(0.0) += e.amount_g;
        }
        Ok(History {
            chemical_id: chemical_id.to_string(),
            entries,
            daily: days
                .into_iter()
                .map(|(day, total_g)| DailyTotal { day, total_g })
                .collect(),
        })
    }

    /// One row per registered chemical, ordered by id.
    pub fn chemical_index(&self) -> Vec<ChemicalSummary> {
        self.chemicals
            .values()
            .map(|ch| {
                let r = self
                    .remaining_quantity(&ch.chemical_id)
                    .expect("chemical is registered");
                ChemicalSummary {
                    chemical_id: ch.chemical_id.clone(),
                    name: ch.name.clone(),
                    hazard_class: ch.hazard_class.clone(),
                    reorder_lead_time_days: ch.reorder_lead_time_days,
                    available_g: r.available_g,
                    total_g: r.total_g,
                    containers: r.containers,
                }
            })
            .collect()
    }
}
