"""Put hand rotations onto a body: accepted sides match the hand exactly,
implausible wrists are rejected and leave the body untouched."""

import numpy as np

from neuralannot import rotmath, synthdata
from neuralannot.bodymodel import ModelParams, forward_kinematics, shape_rest
from neuralannot.integrate import integrate_body_hands


def main():
    model = synthdata.gen_model(0, "body")
    body = ModelParams.zeros("body")
    G0 = forward_kinematics(model, body.global_rot, body.joint_rots, shape_rest(model, body.betas)[1]).rots
    # hand rotations given relative to the current wrists: a mild turn and a
    # wrist bent 80 degrees
    plausible = G0[model.role("right_wrist")] @ rotmath.euler_to_mat((0.4, 0.2, -0.3))
    implausible = G0[model.role("left_wrist")] @ rotmath.euler_to_mat((0.0, 1.4, 0.0))

    hands = {"right": plausible, "left": implausible}
    out, reports = integrate_body_hands(model, body, hands["right"], hands["left"])
    G = forward_kinematics(model, out.global_rot, out.joint_rots, shape_rest(model, out.betas)[1]).rots
    for rep in reports:
        line = f"{rep.side:5s} accepted={rep.accepted} local wrist euler={np.round(rep.wrist_euler, 3)}"
        if rep.accepted:
            wrist = int(model.role(f"{rep.side}_wrist"))
            line += f" |wrist global - hand| = {np.abs(G[wrist] - hands[rep.side]).max():.1e}"
        print(line)


if __name__ == "__main__":
    main()
