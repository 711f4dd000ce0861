pub mod dsl_reference;
