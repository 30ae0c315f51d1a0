"""Published reference values for the full-scale Open MPI experiment.

Desk-scale runs cannot reproduce them: they need the 151230 x 6859 measured
system matrix and a pretrained network denoiser.  They are kept here for
anyone wiring real data into the harness.  Each entry pairs the value with
the literal text it is published as, which ``test_published_constants`` checks.
"""

# validated parameters, hybrid validation dataset (30 phantoms)
TIKHONOV_LAMBDA = (5e5, r"\lambda_\mathrm{Tik.}=5\cdot 10^{5}")
ART_LAMBDA = (2e4, r"\lambda_{\mathrm{ART}}=2\cdot 10^{4}")
ART_SWEEPS = (200, "it=200")
PPMPI_SNR_DB = (22, r"\mathrm{SNR}_{\mathrm{db}} = $22")
PPMPI_N_IT = (1606, "$n_\\mathrm{it}=$1606")
PNP_MU0 = (2e5, r"\mu_0 = 2\cdot 10^5")
PNP_N_IT = (7, r"n_\mathrm{it}=7")
PNP_L1_MU0 = (3e5, r"\mu_0 = 3\cdot 10^5")
PNP_L1_N_IT = (5, r"n_\mathrm{it}=5")

# validation PSNR, mean +- std
TIKHONOV_PSNR = ((25.28, 3.28), r"25.28\pm 3.28")
PNP_PSNR = ((30.45, 5.04), r"30.45 \pm 5.04")
PNP_L1_PSNR = ((29.77, 5.82), r"29.77 \pm 5.82")

# shape phantom, PnP with the whitened rank-2000 preprocessing
SHAPE_PSNR_MAX = (31.87, "31.87")
SHAPE_SSIM_MAX = (0.954, "0.954")

RSVD_RANK = (2000, "K=2000")
GRID_VOXELS = (6859, "K=19^3 = 6859")

ALL = {k: v for k, v in globals().items() if k.isupper() and k != "ALL"}
