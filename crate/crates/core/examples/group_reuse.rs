//! How blocks are split into groups and how often each converter runs.

use plugdit::converters::make_group_plan;

fn main() -> anyhow::Result<()> {
    let depth = 8;
    println!("{depth} blocks");
    for (groups, gre, stack_n) in [
        (8, false, 1),
        (4, false, 1),
        (4, true, 1),
        (3, true, 1),
        (2, true, 2),
        (1, true, 1),
    ] {
        let plan = make_group_plan(depth, groups, gre, stack_n)?;
        let sites: Vec<String> = (0..depth)
            .map(|b| {
                let g = plan.group_of(b);
                if gre || plan.is_first(b) {
                    format!("c{g}")
                } else {
                    "--".into()
                }
            })
            .collect();
        println!(
            "groups {groups} gre {gre:<5} stack {stack_n}: sizes {:?}, converter before block [{}], {} calls per forward",
            plan.sizes(),
            sites.join(" "),
            plan.calls_per_forward()
        );
    }
    // a remainder goes to the last groups
    println!("10 blocks / 4 groups -> {:?}", make_group_plan(10, 4, true, 1)?.sizes());
    Ok(())
}
