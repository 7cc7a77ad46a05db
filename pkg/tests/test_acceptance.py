"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the output. Criteria 5 and 6 train and fit real models
and take a few minutes on a single CPU.
"""

import json
import time

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from _oracles import central_difference, directional_gradient_check, homogeneous_projection, relative_error
from test_dataio import make_annotation, palm_annotation, record
from test_losses import (
    ConstantBank,
    INTR,
    loop_loss_2d,
    loop_loss_3d,
    points_in_front,
    random_case,
    rotations_for,
)
from test_losses import B as LB
from test_losses import J as LJ
from test_losses import K as LK
from test_metrics import annotation, random_similarity, square_annotation
from test_regressor import mini_problem

from handrecon.camera import CameraIntrinsics, CameraState, CropBox, _project, project, project_with_gradients
from handrecon.dataio import (
    consistency_check,
    load_annotations,
    load_asset,
    load_bundled_rig,
    save_annotations,
    save_asset,
    scan_annotations,
    synthesize_dataset,
)
from handrecon.errors import FormatError
from handrecon.fitter import fit, init_camera_from_keypoints
from handrecon.hand_model import (
    HandState,
    forward_kinematics,
    pose_hand,
    pose_hand_with_gradients,
    rest_joints,
    shape_blend,
    theta_to_rotations,
)
from handrecon.losses import (
    DiscriminatorBank,
    GroundTruthSample,
    Prediction,
    adversarial_discriminator_loss,
    adversarial_generator_loss,
    loss_2d,
    loss_3d,
)
from handrecon.metrics import PCKCount, auc, f_score, pa_mpjpe, pck, procrustes_align
from handrecon.regressor import batch_ground_truth
from handrecon.rotations import geodesic_distance, matrix_to_axis_angle, rodrigues
from handrecon.train import ToyRunConfig, scaling_sweep, train_toy

N_GEOMETRY = 1000
N_GRADIENT = 100
N_FIT = 50


@pytest.fixture(scope="module")
def rig():
    return load_bundled_rig()


def _random_axis_angles(rng, n):
    # angles spread over [0, pi) plus a few tiny and near-pi ones
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0, np.pi, n)
    angle[:10] = 10.0 ** rng.uniform(-12, -4, 10)
    angle[10:20] = np.pi - 10.0 ** rng.uniform(-9, -3, 10)
    return axis * angle[:, None]


def _subtree(parents, j):
    members = {j}
    for k in range(len(parents)):
        if parents[k] in members:
            members.add(k)
    return sorted(members)


# --- 1. geometry ----------------------------------------------------------------


@pytest.mark.acceptance(1, "geometry suite")
def test_geometry_suite(rig, record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    n = N_GEOMETRY

    # rotations are orthonormal with determinant one
    r = rodrigues(_random_axis_angles(rng, n))
    eye = torch.eye(3, dtype=torch.float64)
    ortho = float((r @ r.transpose(-1, -2) - eye).abs().max())
    det = float((torch.linalg.det(r) - 1).abs().max())

    # zero pose reproduces the shaped template and its regressed joints
    beta = rng.normal(size=(n, rig.B))
    rest = pose_hand(rig, HandState(np.zeros((n, 3 * rig.J)), beta))
    shaped = torch.tensor(rig.template_vertices) + shape_blend(rig, beta)
    tips = shaped[:, torch.tensor(rig.fingertip_vertex_ids)]
    expect_joints = torch.cat([rest_joints(rig, beta), tips], 1)[:, torch.tensor(rig.keypoint_order)]
    rest_err = max(float((rest.vertices - shaped).abs().max()), float((rest.joints - expect_joints).abs().max()))

    # composing a world rotation into the root rotates the whole hand about the root joint
    theta = rng.normal(scale=0.5, size=(n, 3 * rig.J))
    posed = pose_hand(rig, HandState(theta, beta))
    world = rodrigues(_random_axis_angles(rng, n))
    moved_theta = theta.copy()
    moved_theta[:, :3] = matrix_to_axis_angle(world @ rodrigues(theta[:, :3])).numpy()
    moved = pose_hand(rig, HandState(moved_theta, beta))
    root = rest_joints(rig, beta)[:, :1]
    expect_v = torch.einsum("nij,nvj->nvi", world, posed.vertices - root) + root
    expect_k = torch.einsum("nij,nvj->nvi", world, posed.joints - root) + root
    equiv = max(float((moved.vertices - expect_v).abs().max()), float((moved.joints - expect_k).abs().max()))

    # re-rotating one joint moves its subtree rigidly and leaves the rest in place
    rest_j = rest_joints(rig, beta)
    _, base = forward_kinematics(rig, theta, rest_j)
    joint = rng.integers(1, rig.J, n)
    bent = theta.copy()
    bent[np.arange(n), 3 * joint] += rng.normal(size=n)
    bent[np.arange(n), 3 * joint + 1] += rng.normal(size=n)
    bent[np.arange(n), 3 * joint + 2] += rng.normal(size=n)
    _, after = forward_kinematics(rig, bent, rest_j)
    subtree_err = 0.0
    for i in range(n):
        inside = _subtree(rig.parents, int(joint[i]))
        outside = [k for k in range(rig.J) if k not in inside]
        a, b = after[i, inside], base[i, inside]
        subtree_err = max(subtree_err, float((torch.cdist(a, a) - torch.cdist(b, b)).abs().max()))
        subtree_err = max(subtree_err, float((after[i, outside] - base[i, outside]).abs().max()))

    seconds = time.perf_counter() - start
    record_property(
        "detail",
        f"orthonormality {ortho:.1e}, det {det:.1e}, rest {rest_err:.1e}, "
        f"equivariance {equiv:.1e}, subtree {subtree_err:.1e}, {seconds:.1f}s",
    )
    assert ortho < 1e-9 and det < 1e-9
    assert rest_err < 1e-9
    assert equiv < 1e-8
    assert subtree_err < 1e-8
    assert seconds < 10


# --- 2. gradients -----------------------------------------------------------------


def _hand_model_error(rig, rng, h=1e-6):
    theta = rng.normal(scale=0.5, size=3 * rig.J)
    beta = rng.normal(size=rig.B)
    analytic = pose_hand_with_gradients(rig, HandState(theta, beta))
    x = np.concatenate([theta, beta])
    steps = np.concatenate([np.eye(len(x)), -np.eye(len(x))]) * h
    probe = x + steps
    out = pose_hand(rig, HandState(probe[:, : 3 * rig.J], probe[:, 3 * rig.J :]))
    p = len(x)

    def fd(values):
        return ((values[:p] - values[p:]) / (2 * h)).permute(1, 2, 0).numpy()

    dj, dv = fd(out.joints), fd(out.vertices)
    nt = 3 * rig.J
    return max(
        relative_error(analytic.d_joints_d_theta, dj[..., :nt]),
        relative_error(analytic.d_joints_d_beta, dj[..., nt:]),
        relative_error(analytic.d_vertices_d_theta, dv[..., :nt]),
        relative_error(analytic.d_vertices_d_beta, dv[..., nt:]),
    )


def _camera_error(rng, k, h=1e-6):
    n = 21
    pts = rng.normal(scale=0.05, size=(n, 3))
    t = np.array([rng.normal(scale=0.05), rng.normal(scale=0.05), rng.uniform(0.4, 2.0)])
    out = project_with_gradients(pts, CameraState(t, k))
    fd_pts = central_difference(lambda f: project(f.reshape(n, 3), CameraState(t, k)).numpy(), pts.ravel(), h)
    fd_pts = fd_pts.reshape(n, 2, n, 3)
    block = np.stack([fd_pts[i, :, i, :] for i in range(n)])
    off_diag = fd_pts.copy()
    off_diag[np.arange(n), :, np.arange(n), :] = 0
    fd_t = central_difference(lambda tt: project(pts, CameraState(tt, k)).numpy(), t, h)
    assert np.abs(off_diag).max() < 1e-6
    return max(relative_error(out.d_pixels_d_points, block), relative_error(out.d_pixels_d_translation, fd_t))


def _loss_error(rng, bank, h=1e-6):
    t, b, x = random_case(rng)
    tg, bg, xg = random_case(rng)
    gt3 = GroundTruthSample(theta=tg, beta=bg, joints3d=xg)
    n_t, n_b = 3 * LJ, LB

    def split(v):
        v = torch.as_tensor(v)
        return v[:n_t], v[n_t : n_t + n_b], v[n_t + n_b :].reshape(LK, 3)

    def f3(v):
        th, be, jo = split(v)
        return loss_3d(Prediction(beta=be, joints3d=jo, theta=th), gt3)

    vec = torch.tensor(np.concatenate([t, b, x.ravel()]), requires_grad=True)
    (g3,) = torch.autograd.grad(f3(vec), vec)
    err = relative_error(g3.numpy(), central_difference(lambda v: f3(v).item(), vec.detach().numpy(), h))

    pts, tr = points_in_front(rng)
    w = rng.uniform(0.2, 1, LK) * (rng.random(LK) < 0.8)
    gt2 = GroundTruthSample(keypoints2d=rng.uniform(0, 128, size=(LK, 2)), keypoint_weights=w)

    def f2(v):
        v = torch.as_tensor(v)
        return loss_2d(v[:-3].reshape(LK, 3), v[-3:], INTR, gt2)

    flat = torch.tensor(np.concatenate([pts.ravel(), tr]), requires_grad=True)
    (g2,) = torch.autograd.grad(f2(flat), flat)
    err = max(err, relative_error(g2.numpy(), central_difference(lambda v: f2(v).item(), flat.detach().numpy(), h)))

    rots = rotations_for(rng, (2,))
    beta = torch.tensor(rng.normal(size=(2, LB)))

    def fa(v):
        v = torch.as_tensor(v)
        return adversarial_generator_loss(v[: 2 * LJ * 9].reshape(2, LJ, 3, 3), v[2 * LJ * 9 :].reshape(2, LB), bank)

    av = torch.cat([rots.flatten(), beta.flatten()]).requires_grad_(True)
    (ga,) = torch.autograd.grad(fa(av), av)
    return max(err, relative_error(ga.numpy(), central_difference(lambda v: fa(v).item(), av.detach().numpy(), h)))


@pytest.mark.acceptance(2, "gradient suite")
def test_gradient_suite(rig, record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    k = CameraIntrinsics(480.0, 500.0, 64.0, 60.0, 128, 128)
    bank = DiscriminatorBank(LJ, LB, seed=0).double()
    hand = max(_hand_model_error(rig, rng) for _ in range(N_GRADIENT))
    camera = max(_camera_error(rng, k) for _ in range(N_GRADIENT))
    losses = max(_loss_error(rng, bank) for _ in range(N_GRADIENT))
    end_to_end = 0.0
    for seed in range(N_GRADIENT):
        loss_fn, params = mini_problem(seed, rig)
        end_to_end = max(end_to_end, directional_gradient_check(loss_fn, params, np.random.default_rng(seed), h=1e-6))
    seconds = time.perf_counter() - start
    record_property(
        "detail",
        f"{N_GRADIENT} configs each; hand model {hand:.1e}, camera {camera:.1e}, "
        f"losses {losses:.1e}, end-to-end {end_to_end:.1e}, {seconds:.0f}s",
    )
    assert hand < 1e-4 and camera < 1e-4 and losses < 1e-4
    assert end_to_end < 1e-3
    assert seconds < 120


# --- 3. metrics ---------------------------------------------------------------------


@pytest.mark.acceptance(3, "metric oracle suite")
def test_metric_oracle_suite(record_property):
    rng = np.random.default_rng(2)

    # closed-form alignment is never beaten by a 10^4-sample random search
    beaten = 0
    for _ in range(20):
        src = rng.normal(scale=0.05, size=(21, 3))
        s, r, t = random_similarity(rng)
        tgt = s * src @ r.T + t + rng.normal(scale=0.01, size=src.shape)
        best = ((procrustes_align(src, tgt).apply(src) - tgt) ** 2).sum()
        scales = s * rng.uniform(0.5, 1.5, 10_000)
        rots = Rotation.random(10_000, random_state=rng.integers(1 << 31)).as_matrix()
        trans = tgt.mean(0) - scales[:, None] * np.einsum("nij,j->ni", rots, src.mean(0))
        trans += rng.normal(scale=0.01, size=trans.shape)
        moved = scales[:, None, None] * np.einsum("nij,pj->npi", rots, src) + trans[:, None]
        beaten += int((((moved - tgt) ** 2).sum((1, 2)) < best).sum())

    # PA-MPJPE ignores any similarity applied to the prediction
    invariance = 0.0
    for _ in range(100):
        gt = rng.normal(scale=0.05, size=(21, 3))
        pred = gt + rng.normal(scale=0.01, size=gt.shape)
        s, r, t = random_similarity(rng)
        invariance = max(invariance, abs(pa_mpjpe(s * pred @ r.T + t, gt) - pa_mpjpe(pred, gt)))

    uniform_auc = auc(rng.uniform(0, 50, 100_000))

    # PCK and F-score never decrease as the threshold grows
    monotone = True
    for _ in range(50):
        kp = rng.uniform(0, 200, size=(21, 2))
        ann = annotation(kp, occluded=rng.random(21) < 0.3)
        pred2d = kp + rng.normal(scale=15, size=kp.shape)
        for split in ("all", "visible", "occluded"):
            counts = [pck(pred2d, ann, thr, split).correct for thr in np.linspace(0.01, 0.5, 25)]
            monotone &= all(b >= a for a, b in zip(counts, counts[1:]))
        verts = rng.normal(scale=0.05, size=(60, 3))
        noisy = verts + rng.normal(scale=0.005, size=verts.shape)
        scores = [f_score(noisy, verts, thr) for thr in np.linspace(0.5, 30, 25)]
        monotone &= all(b >= a for a, b in zip(scores, scores[1:]))

    # hand-enumerated example: offsets of 4, 7 and 12 % of a 100 px box, seven of each
    kp = square_annotation(100.0)
    directions = rng.normal(size=(21, 2))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    pred2d = kp + np.array([0.04, 0.07, 0.12] * 7)[:, None] * 100 * directions
    ann = annotation(kp)
    enumerated = [pck(pred2d, ann, thr) for thr in (0.05, 0.10, 0.15)]

    record_property(
        "detail",
        f"random search wins {beaten}, invariance {invariance:.1e}, uniform AUC {uniform_auc:.4f}, "
        f"monotone {monotone}, PCK {[c.correct for c in enumerated]}/21",
    )
    assert beaten == 0
    assert invariance < 1e-9
    assert abs(uniform_auc - 0.5) <= 0.01
    assert monotone
    assert enumerated == [PCKCount(7, 21), PCKCount(14, 21), PCKCount(21, 21)]


# --- 4. losses -----------------------------------------------------------------------


@pytest.mark.acceptance(4, "loss formula suite")
def test_loss_formula_suite(record_property):
    rng = np.random.default_rng(3)
    bank = DiscriminatorBank(LJ, LB, seed=1).double()
    worst = {"3d": 0.0, "2d": 0.0, "generator": 0.0, "discriminator": 0.0}
    for _ in range(100):
        t, b, x = random_case(rng)
        tg, bg, xg = random_case(rng)
        value = loss_3d(Prediction(torch.tensor(b), torch.tensor(x), theta=torch.tensor(t)), GroundTruthSample(tg, bg, xg))
        worst["3d"] = max(worst["3d"], abs(value.item() - loop_loss_3d(t, tg, b, bg, x, xg)))

        pts, tr = points_in_front(rng)
        target = rng.uniform(0, 128, size=(LK, 2))
        w = rng.uniform(0, 1, LK) * (rng.random(LK) < 0.7)
        gt2 = GroundTruthSample(keypoints2d=target, keypoint_weights=w)
        value = loss_2d(torch.tensor(pts), tr, INTR, gt2).item()
        worst["2d"] = max(worst["2d"], abs(value - loop_loss_2d(pts, tr, target, w)))

        real, fake = rotations_for(rng, (3,)), rotations_for(rng, (3,))
        rb, fb = torch.tensor(rng.normal(size=(3, LB))), torch.tensor(rng.normal(size=(3, LB)))
        dr, df = bank(real, rb).detach().numpy(), bank(fake, fb).detach().numpy()
        gen = sum((df[i, k] - 1) ** 2 for i in range(3) for k in range(LJ + 1)) / 3
        disc = sum((dr[i, k] - 1) ** 2 for i in range(3) for k in range(LJ + 1)) / 3
        disc += sum(df[i, k] ** 2 for i in range(3) for k in range(LJ + 1)) / 3
        worst["generator"] = max(worst["generator"], abs(adversarial_generator_loss(fake, fb, bank).item() - gen))
        value = adversarial_discriminator_loss(real, rb, fake, fb, bank).item()
        worst["discriminator"] = max(worst["discriminator"], abs(value - disc))

    # fixed points: exact targets give exactly zero
    t, b, x = random_case(rng)
    zero_3d = loss_3d(Prediction(torch.tensor(b), torch.tensor(x), theta=torch.tensor(t)), GroundTruthSample(t, b, x))
    pts, tr = points_in_front(rng)
    exact = homogeneous_projection(pts, tr, INTR.fx, INTR.fy, INTR.cx, INTR.cy)
    zero_2d = loss_2d(torch.tensor(pts), tr, INTR, GroundTruthSample(keypoints2d=exact))
    zero_adv = adversarial_generator_loss(rotations_for(rng, (2,)), torch.zeros(2, LB), ConstantBank(1.0))
    fixed = max(abs(zero_3d.item()), abs(zero_2d.item()), abs(zero_adv.item()))

    # masking: masked samples and zero-weight keypoints contribute nothing, not even gradient
    t, b, x = random_case(rng, (4,))
    tg, bg, xg = random_case(rng, (4,))
    mask = torch.tensor([1.0, 0.0, 1.0, 0.0])
    theta = torch.tensor(t, requires_grad=True)
    value = loss_3d(
        Prediction(torch.tensor(b), torch.tensor(x), theta=theta),
        GroundTruthSample(tg, bg, xg, params_mask=mask, joints3d_mask=mask),
    )
    value.backward()
    kept = np.mean([loop_loss_3d(t[i], tg[i], b[i], bg[i], x[i], xg[i]) if i % 2 == 0 else 0.0 for i in range(4)])
    masked_ok = abs(value.item() - kept) < 1e-12 and torch.count_nonzero(theta.grad[1::2]) == 0
    pts_t = torch.tensor(pts, requires_grad=True)
    w = np.ones(LK)
    w[:2] = 0.0
    garbage = exact.copy()
    garbage[:2] = 1e6
    loss_2d(pts_t, tr, INTR, GroundTruthSample(keypoints2d=garbage, keypoint_weights=w)).backward()
    masked_ok = masked_ok and torch.count_nonzero(pts_t.grad[:2]) == 0

    record_property(
        "detail",
        ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", fixed points {fixed:.1e}, masking {masked_ok}",
    )
    assert max(worst.values()) < 1e-9
    assert fixed < 1e-12
    assert masked_ok


# --- 5. fitter -----------------------------------------------------------------------


@pytest.mark.acceptance(5, "fitter round trip")
def test_fitter_round_trip(rig, record_property):
    start = time.perf_counter()
    samples = synthesize_dataset(rig, N_FIT, seed=3)
    _, gt = batch_ground_truth(samples, dtype=torch.float64)
    rest = HandState.zeros(rig, (N_FIT,))
    k = CameraIntrinsics.for_crop(32)

    full = fit(rig, GroundTruthSample(theta=gt.theta, beta=gt.beta, joints3d=gt.joints3d), rest)
    joints = pose_hand(rig, full.state).joints.numpy()
    pa = max(pa_mpjpe(joints[i], gt.joints3d[i].numpy()) for i in range(N_FIT))
    geo = float(geodesic_distance(theta_to_rotations(full.state.theta), theta_to_rotations(gt.theta)).max())

    # joints alone pin the hand up to twist about each bone; the joint error must still vanish
    joint_only = fit(rig, GroundTruthSample(joints3d=gt.joints3d), rest)
    joints = pose_hand(rig, joint_only.state).joints.numpy()
    pa_joint_only = max(pa_mpjpe(joints[i], gt.joints3d[i].numpy()) for i in range(N_FIT))

    cam = init_camera_from_keypoints(rig, gt.keypoints2d, torch.ones(N_FIT, 21), k)
    two_d = fit(rig, GroundTruthSample(keypoints2d=gt.keypoints2d), rest, cam)
    px = _project(pose_hand(rig, two_d.state).joints, two_d.camera.translation, k)
    reproj = float((px - gt.keypoints2d).norm(dim=-1).mean(-1).max())

    converged = int(full.converged.sum() + joint_only.converged.sum() + two_d.converged.sum())
    seconds = time.perf_counter() - start
    record_property(
        "detail",
        f"{N_FIT} samples; 3D PA-MPJPE {pa:.1e} mm, geodesic {geo:.1e} rad, joints-only PA-MPJPE "
        f"{pa_joint_only:.1e} mm, 2D {reproj:.1e} px, converged {converged}/{3 * N_FIT}, {seconds:.0f}s",
    )
    assert pa < 1.0 and pa_joint_only < 1.0
    assert geo < 1e-3
    assert reproj < 0.5
    assert converged == 3 * N_FIT
    assert seconds < 300


# --- 6. training ---------------------------------------------------------------------


@pytest.mark.acceptance(6, "desk-scale training")
def test_desk_scale_training(rig, record_property):
    start = time.perf_counter()
    overfit = train_toy(ToyRunConfig(num_train=8, num_val=0, steps=2000, batch_size=8, seed=0), rig)
    sweep = scaling_sweep(seed=0, steps=1000, rig=rig)
    seconds = time.perf_counter() - start
    val = {name: run.val_error_px for name, run in sweep.items()}
    record_property(
        "detail",
        f"overfit {overfit.train_error_px:.3f} px; held-out "
        + ", ".join(f"{k} {v:.3f}" for k, v in val.items())
        + f" px; {seconds:.0f}s",
    )
    assert overfit.train_error_px < 1.0
    assert all(val["both"] < val[name] for name in ("base", "data-only", "model-only"))
    assert seconds < 1800


# --- 7. dataset tooling ------------------------------------------------------------------


@pytest.mark.acceptance(7, "dataset tooling")
def test_dataset_tooling(rig, tmp_path, record_property):
    # crafted pairs with hand-computed agreement
    exists = np.zeros(21, bool)
    exists[[0, 1, 2, 3, 5, 9, 10, 13, 17, 20]] = True
    occ = np.zeros(21, bool)
    occ[5] = True
    flip = consistency_check([palm_annotation(exists=exists)], [palm_annotation(exists=exists, occluded=occ)])
    exists_b = np.ones(21, bool)
    exists_b[[4, 8, 12]] = False
    offsets = np.zeros((21, 2))
    offsets[1] = [6, 8]
    offsets[2] = [0, 10.5]
    offsets[3] = [7, 7]
    shifted = consistency_check([palm_annotation("h")], [palm_annotation("h", exists=exists_b, offsets=offsets)])
    crafted = (
        (flip.existence_agreement, flip.occlusion_agreement, flip.offset_agreement) == (100.0, 90.0, 100.0)
        and shifted.existence_agreement == 100 * 18 / 21
        and shifted.offset_agreement == 100 * 17 / 18
    )

    # annotation and asset round trips
    r = np.random.default_rng(4)
    mask = r.random(21) < 0.8
    anns = [
        make_annotation("a", seed=1, exists=mask, occluded=mask & (r.random(21) < 0.3)),
        make_annotation("b", "left", seed=2, crop_box=CropBox(1.5, 2.25, 100.0, 90.0)),
        make_annotation("c", seed=3, joints3d=r.normal(size=(21, 3)), theta=r.normal(size=48)),
    ]
    path = tmp_path / "a.jsonl"
    save_annotations(path, anns)
    first = path.read_bytes()
    loaded = load_annotations(path)
    save_annotations(path, loaded)
    ann_exact = loaded == anns and path.read_bytes() == first and loaded[2].joints3d.tobytes() == anns[2].joints3d.tobytes()
    save_asset(tmp_path / "rig.npz", rig)
    back = load_asset(tmp_path / "rig.npz")
    asset_exact = all(
        np.asarray(v).tobytes() == np.asarray(back.arrays()[name]).tobytes() for name, v in rig.arrays().items()
    )

    # schema violations name the offending line
    bad = json.loads(record())
    bad["keypoints"] = bad["keypoints"][:20]
    path.write_text("\n".join([record(image_id="x"), record(image_id="y"), json.dumps(bad)]) + "\n")
    with pytest.raises(FormatError) as info:
        load_annotations(path)
    strict_line = info.value.line
    path.write_text("\n".join([record(image_id="a"), "{not json", record(image_id="a"), record(image_id="b")]) + "\n")
    _, diags = scan_annotations(path)
    lines = [d.line for d in diags]

    record_property(
        "detail",
        f"crafted {crafted}, annotations bit-exact {ann_exact}, asset bit-exact {asset_exact}, "
        f"diagnostic lines {[strict_line] + lines}",
    )
    assert crafted
    assert ann_exact and asset_exact
    assert strict_line == 3 and "expected 21 keypoints" in str(info.value)
    assert lines == [2, 3]
