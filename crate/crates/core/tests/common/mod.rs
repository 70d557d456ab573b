#![allow(dead_code)]

pub mod budget_oracle;
pub mod grad_cases;
pub mod halting_oracle;
