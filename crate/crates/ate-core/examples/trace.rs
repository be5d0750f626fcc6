use ate_core::toy_env::*;
fn main() {
    for links in [vec![0.5, 0.5], vec![0.4, 0.35, 0.25], vec![0.35, 0.3, 0.2, 0.15]] {
        for task in [Task::Reach, Task::Push] {
            let env = ArmEnv::new(links.clone(), TaskSpec::defaults(task)).unwrap();
            let fails: Vec<u64> = (0..1000).filter(|&s| !rollout_expert(&env, s).2).collect();
            println!("{:?} {:?}: {} fails {:?}", links, task, fails.len(), &fails[..fails.len().min(8)]);
        }
    }
}
