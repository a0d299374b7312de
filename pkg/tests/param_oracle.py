"""Closed-form trainable-parameter count, written independently of the model code."""


def conv(fin, fout, k, bn=True):
    return fout * fin * k * k + fout + (2 * fout if bn else 0)


def parts(cin, f, kernels, multiscale, directional):
    pin = cin // 4 if directional and cin % 4 == 0 else cin
    total = 0
    for i in range(4):
        for k in (kernels if multiscale else [kernels[i]]):
            total += conv(pin, f // 4, k)
    return total


def dtnet_params(filters, classes=5, channels=1, kernels=(1, 3, 5, 7), global_kernel=3,
                 multiscale=True, no_mdic=False):
    directional = not no_mdic
    total = 0
    cin = channels
    for f in filters:
        total += parts(cin, f, kernels, multiscale, directional)
        total += conv(cin, f, global_kernel) + conv(2 * f, f, 1) + conv(f, f, 1)
        cin = f
    for f in reversed(filters):
        total += parts(cin, f, kernels, multiscale, directional)
        total += conv(cin, f, 1, bn=False) + conv(2 * f, f, 1)
        cin = f
    return total + conv(cin, classes, 1, bn=False)
