//! Learning when to hand a step of a multi-step task to a human.
//!
//! A binary allocation policy decides, before every step, whether an agent
//! or a human executes it. Trajectories are collected under a uniform
//! behavior policy with both branches sampled at visited states, and the
//! policy is trained offline by clipped importance-sampled policy gradient
//! on `R = T - λC`, where `T` is the task reward and `C` the number of human
//! steps.

pub mod actors;
pub mod cassette;
pub mod choice;
pub mod cli;
pub mod collector;
pub mod envs;
pub mod harness;
pub mod policy;
pub mod rewards;
pub mod seed;
pub mod service;
pub mod trainer;
pub mod trajectory;
